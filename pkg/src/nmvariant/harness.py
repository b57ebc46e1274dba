"""End-to-end scenario runner over a virtual clock.

A scenario drives the whole pipeline: the scheduler admits a request and
picks a serving set, every member's mock replica emits its SQL sequence
tagged with the request tag, the verification proxy votes per position and
forwards matching queries to a mock store. Compromises are injected by
swapping a replica's behavior; a refresh always restores it to honest.

Everything runs on integer milliseconds of virtual time, so a scenario is
fully deterministic under a fixed seed. The optional loopback mode pushes
each query through a real TCP connection carrying the 40-byte tag block,
with the replica's address as the socket's source address.
"""

from __future__ import annotations

import csv
import heapq
import itertools
import logging
import random
import socket
import struct
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, TextIO

from . import scheduler
from .config import SystemConfig, tomllib
from .fleet import FleetState, ReplicaRef, new_fleet
from .sql import WRITE_KINDS, SqlError, parse_sql
from .tagging import (OPTION_BYTES, RequestTag, TagKey, decode_option,
                      encode_option)
from .verifier import (Detected, Forwarded, MatchResult, NormalizationPolicy,
                       QueryEnvelope, VerificationProxy)

log = logging.getLogger(__name__)

LOOPBACK_BASE = "127.1.0.0"


class ScriptError(ValueError):
    """A scenario script failed validation; nothing was executed."""


class HarnessError(LookupError):
    pass


# ---------------------------------------------------------------------------
# replica behaviors

@dataclass(frozen=True)
class Honest:
    name = "honest"


@dataclass(frozen=True)
class DivergentWrite:
    """Replace the first write of every request (the last query if none) with ``payload``."""

    payload: str
    name = "divergent-write"


@dataclass(frozen=True)
class ForgedTag:
    """Flip one MAC bit on every outgoing tag."""

    name = "forged-tag"


@dataclass(frozen=True)
class ReplayTag:
    """Send every query under ``stored``; with no tag given, capture the first one seen."""

    stored: Optional[RequestTag] = None
    name = "replay-tag"


@dataclass(frozen=True)
class Silent:
    """Emit nothing, leaving the other replicas' queries to time out."""

    name = "silent"


Behavior = Honest | DivergentWrite | ForgedTag | ReplayTag | Silent

HONEST = Honest()


def behavior_from_mapping(entry: Mapping[str, Any]) -> Behavior:
    kind = entry.get("behavior")
    if kind == "honest":
        return HONEST
    if kind == "divergent-write":
        payload = entry.get("payload")
        if not isinstance(payload, str) or not payload:
            raise ScriptError("divergent-write needs a non-empty 'payload'")
        return DivergentWrite(payload)
    if kind == "forged-tag":
        return ForgedTag()
    if kind == "replay-tag":
        return ReplayTag()
    if kind == "silent":
        return Silent()
    raise ScriptError(f"unknown behavior {kind!r}")


# ---------------------------------------------------------------------------
# application model

# {ts} is the per-replica nondeterministic slot; the rest come from the request
DEFAULT_APP: dict[str, tuple[str, ...]] = {
    "/view": (
        "SELECT page_id, page_latest FROM page WHERE page_title = '{title}'",
        "SELECT rev_text FROM revision WHERE rev_page = {page}",
    ),
    "/edit": (
        "SELECT page_id FROM page WHERE page_title = '{title}'",
        "INSERT INTO revision (rev_page, rev_text, rev_timestamp) "
        "VALUES ({page}, '{text}', '{ts}')",
        "UPDATE page SET page_touched = '{ts}' WHERE page_id = {page}",
    ),
}

DEFAULT_POLICY = NormalizationPolicy([("page", "page_touched"), ("revision", "rev_timestamp")])

TS_EPOCH = 20260101000000


def is_write(sql: str) -> bool:
    try:
        return parse_sql(sql).kind in WRITE_KINDS
    except SqlError:
        return False


@dataclass(frozen=True)
class ClientRequest:
    path: str
    params: dict = field(hash=False)


class MockReplica:
    """One replica of one variant running the application script."""

    def __init__(self, ref: ReplicaRef, app: Mapping[str, Sequence[str]]):
        self.ref = ref
        self.app = app
        self.behavior: Behavior = HONEST
        self.ts_counter = 0
        self.epoch = 0

    def _timestamp(self) -> str:
        self.ts_counter += 1
        return str(TS_EPOCH + self.ts_counter)

    def queries(self, request: ClientRequest) -> list[str]:
        out = [t.format(ts=self._timestamp(), **request.params) for t in self.app[request.path]]
        if isinstance(self.behavior, DivergentWrite) and out:
            writes = [i for i, text in enumerate(out) if is_write(text)]
            out[writes[0] if writes else -1] = self.behavior.payload
        return out

    def tag_for(self, tag: RequestTag) -> Optional[RequestTag]:
        """Tag this replica attaches; None means it stays silent."""
        b = self.behavior
        if isinstance(b, Silent):
            return None
        if isinstance(b, ForgedTag):
            return RequestTag(tag.id, bytes([tag.mac[0] ^ 1]) + tag.mac[1:])
        if isinstance(b, ReplayTag):
            if b.stored is None:
                self.behavior = ReplayTag(tag)
                return tag
            return b.stored
        return tag

    def restore(self) -> None:
        """Refresh: back to the trusted image, abandoning queued work."""
        self.behavior = HONEST
        self.epoch += 1


class MockFleet:
    def __init__(self, fleet: FleetState, app: Mapping[str, Sequence[str]]):
        self.replicas = {ref.key: MockReplica(ref, app) for ref in fleet.replicas()}

    def __getitem__(self, key: tuple[int, int]) -> MockReplica:
        return self.replicas[key]


def parse_replica(text: str) -> tuple[int, int]:
    try:
        pool, index = (int(x) for x in str(text).split("."))
    except ValueError as exc:
        raise ScriptError(f"replica must look like 'pool.index', got {text!r}") from exc
    return pool, index


def inject(mocks: MockFleet, replica: ReplicaRef | tuple[int, int], behavior: Behavior) -> None:
    """Give ``replica`` a new behavior until its next refresh."""
    key = replica.key if isinstance(replica, ReplicaRef) else tuple(replica)
    if key not in mocks.replicas:
        raise HarnessError(f"no replica {key[0]}.{key[1]}")
    mocks.replicas[key].behavior = behavior


class MockStore:
    """Append-only SQL log standing in for the database."""

    def __init__(self):
        self.log: list[str] = []

    def execute(self, sql: str) -> str:
        self.log.append(sql)
        return "ok"

    @property
    def writes(self) -> list[str]:
        return [s for s in self.log if is_write(s)]


# ---------------------------------------------------------------------------
# loopback transport

class LoopbackWire:
    """Carries (tag block, length, SQL) over TCP from the replica's own address."""

    def __init__(self, host: str = "127.0.0.1"):
        self.server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.server.bind((host, 0))
        self.server.listen(16)
        self.address = self.server.getsockname()

    def close(self) -> None:
        self.server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def frame(tag: RequestTag, sql: str) -> bytes:
        body = sql.encode()
        return encode_option(tag) + struct.pack(">I", len(body)) + body

    def carry(self, source: str, tag: RequestTag, sql: str) -> tuple[str, RequestTag, str]:
        with socket.create_connection(self.address, source_address=(source, 0)) as out:
            out.sendall(self.frame(tag, sql))
        conn, peer = self.server.accept()
        with conn:
            chunks = []
            while chunk := conn.recv(65536):
                chunks.append(chunk)
        data = b"".join(chunks)
        got_tag = decode_option(data[:OPTION_BYTES])
        (length,) = struct.unpack(">I", data[OPTION_BYTES:OPTION_BYTES + 4])
        text = data[OPTION_BYTES + 4:OPTION_BYTES + 4 + length].decode()
        return peer[0], got_tag, text


# ---------------------------------------------------------------------------
# scenario scripts

@dataclass(frozen=True)
class Timing:
    """Virtual latency model, all in milliseconds.

    A replica emits query ``q`` at ``base + (q+1)*(query + n*compare) + jitter``
    after admission; the response leaves ``respond`` after the slowest emission.
    """

    base_ms: int = 5
    query_ms: int = 4
    compare_ms: int = 2
    jitter_ms: int = 3
    respond_ms: int = 1
    retry_ms: int = 20
    think_ms: int = 0


@dataclass(frozen=True)
class RequestEvent:
    at: int
    path: str
    repeat: int = 1
    every: int = 0


@dataclass(frozen=True)
class InjectEvent:
    at: int
    replica: tuple[int, int]
    behavior: Behavior


@dataclass(frozen=True)
class ClientsEvent:
    """Closed-loop clients: each sends its next request as soon as the last one resolves."""

    at: int
    count: int
    until: int
    paths: tuple[str, ...]


@dataclass
class Script:
    events: list = field(default_factory=list)
    timing: Timing = Timing()
    app: dict = field(default_factory=lambda: dict(DEFAULT_APP))


_EVENT_KEYS = {
    "request": {"at", "action", "path", "repeat", "every"},
    "inject": {"at", "action", "replica", "behavior", "payload"},
    "clients": {"at", "action", "count", "until", "paths"},
}


def _int(doc: Mapping, key: str, default=None, minimum: int = 0) -> int:
    value = doc.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ScriptError(f"'{key}' must be an integer >= {minimum}, got {value!r}")
    return value


def script_from_mapping(doc: Mapping[str, Any], config: Optional[SystemConfig] = None) -> Script:
    """Validate a decoded script document; raises :class:`ScriptError` on any problem."""
    extra = set(doc) - {"event", "timing", "app"}
    if extra:
        raise ScriptError(f"unknown script sections: {', '.join(sorted(extra))}")
    app = dict(DEFAULT_APP)
    if "app" in doc:
        app = {}
        for path, templates in doc["app"].items():
            if not (isinstance(templates, list) and templates
                    and all(isinstance(t, str) for t in templates)):
                raise ScriptError(f"app path {path!r} needs a non-empty list of SQL templates")
            app[path] = tuple(templates)
    timing = Timing()
    if "timing" in doc:
        known = {f.name for f in fields(Timing)}
        bad = set(doc["timing"]) - known
        if bad:
            raise ScriptError(f"unknown timing keys: {', '.join(sorted(bad))}")
        timing = Timing(**{k: _int(doc["timing"], k) for k in doc["timing"]})

    events = []
    raw = doc.get("event", [])
    if not isinstance(raw, list):
        raise ScriptError("'event' must be an array of tables")
    for n, ev in enumerate(raw, 1):
        action = ev.get("action")
        if action not in _EVENT_KEYS:
            raise ScriptError(f"event {n}: unknown action {action!r}")
        bad = set(ev) - _EVENT_KEYS[action]
        if bad:
            raise ScriptError(f"event {n}: unknown keys {', '.join(sorted(bad))}")
        at = _int(ev, "at")
        if action == "request":
            path = ev.get("path", "/view")
            if path not in app:
                raise ScriptError(f"event {n}: unknown path {path!r}")
            events.append(RequestEvent(at, path, _int(ev, "repeat", 1, 1), _int(ev, "every", 0)))
        elif action == "inject":
            if "replica" not in ev:
                raise ScriptError(f"event {n}: inject needs 'replica'")
            key = parse_replica(ev["replica"])
            if config is not None and not (1 <= key[0] <= config.n and 1 <= key[1] <= config.m):
                raise ScriptError(f"event {n}: no replica {ev['replica']} in an "
                                  f"n={config.n}, m={config.m} system")
            events.append(InjectEvent(at, key, behavior_from_mapping(ev)))
        else:
            paths = ev.get("paths", ["/view"])
            if not paths or any(p not in app for p in paths):
                raise ScriptError(f"event {n}: paths must be known app paths, got {paths!r}")
            until = _int(ev, "until")
            if until < at:
                raise ScriptError(f"event {n}: 'until' precedes 'at'")
            events.append(ClientsEvent(at, _int(ev, "count", 1, 1), until, tuple(paths)))
    return Script(events, timing, app)


def load_script(path: str | Path, config: Optional[SystemConfig] = None) -> Script:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ScriptError(f"cannot read script {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ScriptError(f"malformed script {path}: {exc}") from exc
    return script_from_mapping(doc, config)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class ScenarioMetrics:
    """Counters for one run; ``ok + 503 + aborted + timed_out + in_flight == requests_sent``."""

    requests_sent: int = 0
    ok_responses: int = 0
    unavailable_503: int = 0
    aborted: int = 0
    timed_out: int = 0
    detections: int = 0
    forwarded_writes: int = 0
    refreshes_periodic: int = 0
    refreshes_detection: int = 0
    in_flight: int = 0
    elapsed_ms: int = 0

    @property
    def goodput(self) -> float:
        """HTTP-200 responses per virtual second."""
        return self.ok_responses * 1000 / self.elapsed_ms if self.elapsed_ms else 0.0

    def conserved(self) -> bool:
        return (self.ok_responses + self.unavailable_503 + self.aborted + self.timed_out
                + self.in_flight) == self.requests_sent


def write_metrics_csv(rows: Iterable[ScenarioMetrics], fh: TextIO) -> None:
    names = [f.name for f in fields(ScenarioMetrics)]
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(names + ["goodput"])
    for m in rows:
        writer.writerow([getattr(m, n) for n in names] + [f"{m.goodput:.4f}"])


def summarize(m: ScenarioMetrics) -> str:
    return "\n".join([
        f"requests sent      {m.requests_sent}",
        f"  ok               {m.ok_responses}",
        f"  unavailable 503  {m.unavailable_503}",
        f"  aborted          {m.aborted}",
        f"  timed out        {m.timed_out}",
        f"  in flight        {m.in_flight}",
        f"detections         {m.detections}",
        f"forwarded writes   {m.forwarded_writes}",
        f"refreshes          {m.refreshes_periodic} periodic, {m.refreshes_detection} detection",
        f"virtual time       {m.elapsed_ms} ms",
        f"goodput            {m.goodput:.2f} ok/s",
    ])


# ---------------------------------------------------------------------------
# the runner

@dataclass
class _Pending:
    admitted: scheduler.AdmittedRequest
    request: ClientRequest
    positions: int
    client: Optional[int]
    forwarded: int = 0


class Scenario:
    """One wired-up system; build it, optionally inject, then :meth:`run`."""

    def __init__(self, config: SystemConfig, script: Optional[Script] = None, seed: int = 0,
                 policy: Optional[NormalizationPolicy] = None, key: Optional[TagKey] = None,
                 wire: Optional[LoopbackWire] = None):
        self.config = config
        self.script = script or Script()
        self.timing = self.script.timing
        self.rng = random.Random(seed)
        self.key = key or TagKey(self.rng.randbytes(32))
        self.wire = wire
        self.fleet = new_fleet(config, LOOPBACK_BASE if wire else "10.0.0.0")
        self.mocks = MockFleet(self.fleet, self.script.app)
        self.store = MockStore()
        self.proxy = VerificationProxy(self.fleet, self.key, policy or DEFAULT_POLICY,
                                       self.store, on_detect=self._on_detect)
        self.metrics = ScenarioMetrics()
        self.pending: dict[int, _Pending] = {}
        self._queue: list = []
        self._seq = itertools.count()
        self._events_seen = 0
        self._outcomes_seen = 0
        self._client_until: dict[int, tuple[int, tuple[str, ...]]] = {}
        self.now = 0
        for ev in self.script.events:
            self._schedule_script(ev)

    # -- event queue ------------------------------------------------------

    def _push(self, at: int, kind: str, *payload) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), kind, payload))

    def _schedule_script(self, ev) -> None:
        if isinstance(ev, RequestEvent):
            for r in range(ev.repeat):
                self._push(ev.at + r * ev.every, "request", ev.path, None)
        elif isinstance(ev, InjectEvent):
            self._push(ev.at, "inject", ev.replica, ev.behavior)
        else:
            for _ in range(ev.count):
                cid = len(self._client_until)
                self._client_until[cid] = (ev.until, ev.paths)
                self._push(ev.at, "client", cid)

    def run(self, until: Optional[int] = None) -> ScenarioMetrics:
        """Process events in time order; stops when none are left (or past ``until``)."""
        while self._queue:
            at, _, kind, payload = self._queue[0]
            if until is not None and at > until:
                break
            heapq.heappop(self._queue)
            self.now = at
            self._sync_refreshes()
            scheduler.tick(self.fleet, at)
            self._sync_refreshes()
            getattr(self, "_on_" + kind)(*payload)
            self._sync_refreshes()
        self.metrics.in_flight = len(self.pending)
        self.metrics.elapsed_ms = self.now
        return self.metrics

    # -- bookkeeping ------------------------------------------------------

    def _sync_refreshes(self) -> None:
        """Restore the mock for every replica the scheduler sent into refresh."""
        events = self.fleet.events
        for ev in events[self._events_seen:]:
            if ev.kind != "refresh":
                continue
            for key in ev.replicas:
                self.mocks[key].restore()
            if ev.detail == "detection":
                self.metrics.refreshes_detection += len(ev.replicas)
            else:
                self.metrics.refreshes_periodic += len(ev.replicas)
        self._events_seen = len(events)

    def _sync_outcomes(self) -> None:
        outcomes = self.proxy.outcomes
        for oc in outcomes[self._outcomes_seen:]:
            if isinstance(oc, Forwarded):
                if oc.request_id in self.pending:
                    self.pending[oc.request_id].forwarded += 1
                if oc.result is MatchResult.MATCH:
                    self.metrics.forwarded_writes += 1
            elif isinstance(oc, Detected):
                self.metrics.detections += 1
        self._outcomes_seen = len(outcomes)

    def _on_detect(self, replicas: Sequence[ReplicaRef], now: int) -> None:
        scheduler.refresh_now(self.fleet, replicas, now)

    # -- handlers ---------------------------------------------------------

    def _on_inject(self, replica: tuple[int, int], behavior: Behavior) -> None:
        inject(self.mocks, replica, behavior)

    def _on_client(self, cid: int) -> None:
        until, paths = self._client_until[cid]
        if self.now <= until:
            self._on_request(self.rng.choice(paths), cid)

    def _on_request(self, path: str, client: Optional[int]) -> None:
        self.metrics.requests_sent += 1
        try:
            admitted = scheduler.admit(self.fleet, self.key, self.rng, self.now)
        except scheduler.Unavailable:
            self.metrics.unavailable_503 += 1
            if client is not None:
                self._push(self.now + self.timing.retry_ms, "client", client)
            return
        scheduler.accumulate_refresh(self.fleet, self.rng, self.now)

        page = self.rng.randrange(1, 1000)
        request = ClientRequest(path, {"page": page, "title": f"Page_{page}",
                                       "text": f"revision of request {admitted.id}"})
        positions = len(self.script.app[path])
        self.pending[admitted.id] = _Pending(admitted, request, positions, client)

        t = self.timing
        step = t.query_ms + self.config.n * t.compare_ms
        latest = self.now
        for ref in admitted.serving_set:
            mock = self.mocks[ref.key]
            jitter = self.rng.randint(0, t.jitter_ms)
            for pos, sql in enumerate(mock.queries(request)):
                at = self.now + t.base_ms + (pos + 1) * step + jitter
                latest = max(latest, at)
                self._push(at, "emit", ref.key, mock.epoch, admitted.tag, pos, sql)
        self._push(latest + t.respond_ms, "respond", admitted.id)

    def _on_emit(self, key: tuple[int, int], epoch: int, tag: RequestTag,
                 pos: int, sql: str) -> None:
        mock = self.mocks[key]
        if mock.epoch != epoch:
            return  # the replica was refreshed after queueing this query
        sent_tag = mock.tag_for(tag)
        if sent_tag is None:
            return
        source = mock.ref.address
        if self.wire is not None:
            source, sent_tag, sql = self.wire.carry(source, sent_tag, sql)
        self.proxy.ingest(QueryEnvelope(source, sent_tag, sql, self.now, pos), self.now)
        self._sync_refreshes()
        self._sync_outcomes()

    def _finish(self, rid: int, timed_out: bool) -> None:
        p = self.pending.pop(rid)
        try:
            scheduler.complete(self.fleet, p.admitted, self.now)
        except scheduler.RequestAborted:
            self.metrics.aborted += 1
        else:
            if timed_out:
                self.metrics.timed_out += 1
            else:
                self.metrics.ok_responses += 1
        if p.client is not None:
            self._push(self.now + self.timing.think_ms, "client", p.client)

    def _on_respond(self, rid: int) -> None:
        p = self.pending[rid]
        if p.forwarded == p.positions or rid in self.fleet.aborted:
            self._finish(rid, timed_out=False)
        else:
            self._push(self.now + self.config.queue_timeout, "deadline", rid)

    def _on_deadline(self, rid: int) -> None:
        self.proxy.expire(self.now)
        self._sync_outcomes()
        self._finish(rid, timed_out=True)


def run_scenario(config: SystemConfig, script: Script | Mapping[str, Any], seed: int = 0,
                 policy: Optional[NormalizationPolicy] = None,
                 loopback: bool = False) -> ScenarioMetrics:
    """Run a scenario to completion and return its metrics."""
    if not isinstance(script, Script):
        script = script_from_mapping(script, config)
    if loopback:
        with LoopbackWire() as wire:
            return Scenario(config, script, seed, policy, wire=wire).run()
    return Scenario(config, script, seed, policy).run()


# ---------------------------------------------------------------------------
# throughput trends

@dataclass(frozen=True)
class Load:
    clients: int = 8
    duration_ms: int = 20_000
    paths: tuple[str, ...] = ("/view", "/edit")


@dataclass(frozen=True)
class TrendPoint:
    n: int
    m: int
    k: Fraction
    goodput: float
    metrics: ScenarioMetrics = field(compare=False, repr=False)

    @property
    def k_over_n(self) -> Fraction:
        return self.k / self.n


def goodput_trend(configs: Sequence[SystemConfig], load: Load = Load(),
                  seed: int = 0) -> list[TrendPoint]:
    """Run the same closed-loop load against every config and report ok responses per second."""
    script = Script([ClientsEvent(0, load.clients, load.duration_ms, load.paths)])
    out = []
    for cfg in configs:
        metrics = Scenario(cfg, script, seed).run()
        out.append(TrendPoint(cfg.n, cfg.m, cfg.k, metrics.goodput, metrics))
    return out


def write_trend_csv(points: Iterable[TrendPoint], fh: TextIO) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["n", "m", "k", "k_over_n", "goodput", "ok", "unavailable_503", "aborted"])
    for p in points:
        writer.writerow([p.n, p.m, str(p.k), str(p.k_over_n), f"{p.goodput:.4f}",
                         p.metrics.ok_responses, p.metrics.unavailable_503, p.metrics.aborted])
