"""Verification proxy: per-request vote queues, tag checks and unanimous SQL voting.

Replica queries for one request id are grouped by pool and by position in
the replica's query stream. When every pool has delivered its query for
the current position the tags are checked against the collected source
addresses, the queries are normalized and compared, and either a single
copy is forwarded to storage or the contributing replicas are refreshed.
"""

from __future__ import annotations

import enum
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Protocol, Sequence

from . import sql as q
from .fleet import FleetState, ReplicaRef
from .tagging import RequestTag, TagKey, TagVerdict, verify_tag

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)


class PolicyError(ValueError):
    pass


class UnknownSource(LookupError):
    pass


# ---------------------------------------------------------------------------
# normalization policy

class NormalizationPolicy:
    """Set of (table, column) pairs whose values legitimately differ across replicas."""

    def __init__(self, entries: Iterable[tuple[str, str]] = ()):
        seen: set[tuple[str, str]] = set()
        for table, column in entries:
            key = (table.lower(), column.lower())
            if key in seen:
                raise PolicyError(f"duplicate policy entry {key[0]}.{key[1]}")
            seen.add(key)
        self._entries = frozenset(seen)

    def is_nondeterministic(self, table: str, column: str) -> bool:
        return (table.lower(), column.lower()) in self._entries

    @property
    def entries(self) -> frozenset[tuple[str, str]]:
        return self._entries

    def __len__(self):
        return len(self._entries)

    def __repr__(self):
        cols = ", ".join(f"{t}.{c}" for t, c in sorted(self._entries))
        return f"NormalizationPolicy({cols})"

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "NormalizationPolicy":
        """Build from ``{"table": {name: {"nondeterministic": [cols]}}}``."""
        extra = sorted(set(doc) - {"table"})
        if extra:
            raise PolicyError(f"unknown policy sections: {', '.join(extra)}")
        tables = doc.get("table", {})
        if not isinstance(tables, dict):
            raise PolicyError("[table] must be a table of per-table sections")
        entries = []
        for table, body in tables.items():
            if not isinstance(body, dict):
                raise PolicyError(f"[table.{table}] must be a section")
            unknown = sorted(set(body) - {"nondeterministic"})
            if unknown:
                raise PolicyError(f"unknown keys in [table.{table}]: {', '.join(unknown)}")
            cols = body.get("nondeterministic", [])
            if not isinstance(cols, list) or not all(isinstance(c, str) for c in cols):
                raise PolicyError(f"[table.{table}].nondeterministic must be a list of names")
            entries.extend((table, c) for c in cols)
        return cls(entries)


def load_policy(path: str | Path) -> NormalizationPolicy:
    """Read a policy file.

    Format::

        [table.page]
        nondeterministic = ["page_touched"]
    """
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise PolicyError(f"cannot read policy {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise PolicyError(f"malformed policy {path}: {exc}") from exc
    return NormalizationPolicy.from_mapping(doc)


# ---------------------------------------------------------------------------
# normalization

ND = q.Placeholder()


@dataclass(frozen=True)
class _Scope:
    default: Optional[str]
    names: Mapping[str, str]
    outer: Optional["_Scope"] = None

    @classmethod
    def for_table(cls, ref: Optional[q.TableRef], outer: Optional["_Scope"] = None) -> "_Scope":
        if ref is None:
            return cls(None, {}, outer)
        names = {ref.name.key: ref.name.key}
        if ref.alias is not None:
            names[ref.alias.key] = ref.name.key
        return cls(ref.name.key, names, outer)

    def resolve(self, col: q.ColumnRef) -> Optional[str]:
        if col.table is None:
            return self.default
        scope: Optional[_Scope] = self
        while scope is not None:
            if col.table.key in scope.names:
                return scope.names[col.table.key]
            scope = scope.outer
        return col.table.key


def _flagged(col: q.ColumnRef, scope: _Scope, policy: NormalizationPolicy) -> bool:
    table = scope.resolve(col)
    return table is not None and policy.is_nondeterministic(table, col.name.key)


def _norm_expr(expr, scope: _Scope, policy: NormalizationPolicy):
    if isinstance(expr, q.Subquery):
        return q.Subquery(_norm_select(expr.select, policy, scope))
    if isinstance(expr, q.BinaryOp):
        return replace(expr, left=_norm_expr(expr.left, scope, policy),
                       right=_norm_expr(expr.right, scope, policy))
    if isinstance(expr, q.Negate):
        return q.Negate(_norm_expr(expr.operand, scope, policy))
    if isinstance(expr, q.FuncCall):
        return replace(expr, args=tuple(_norm_expr(a, scope, policy) for a in expr.args))
    return expr


def _norm_predicate(pred, scope: _Scope, policy: NormalizationPolicy):
    if isinstance(pred, q.Comparison):
        left = _norm_expr(pred.left, scope, policy)
        right = _norm_expr(pred.right, scope, policy)
        if pred.op == "=":
            if isinstance(left, q.ColumnRef) and isinstance(right, q.Literal) \
                    and _flagged(left, scope, policy):
                right = ND
            elif isinstance(right, q.ColumnRef) and isinstance(left, q.Literal) \
                    and _flagged(right, scope, policy):
                left = ND
        return q.Comparison(pred.op, left, right)
    if isinstance(pred, q.IsNull):
        return replace(pred, operand=_norm_expr(pred.operand, scope, policy))
    if isinstance(pred, q.InList):
        return replace(pred, operand=_norm_expr(pred.operand, scope, policy),
                       items=tuple(_norm_expr(i, scope, policy) for i in pred.items))
    raise TypeError(pred)


def _norm_where(preds, scope, policy):
    return tuple(_norm_predicate(p, scope, policy) for p in preds)


def _norm_select(sel: q.Select, policy: NormalizationPolicy,
                 outer: Optional[_Scope] = None) -> q.Select:
    scope = _Scope.for_table(sel.table, outer)
    return replace(
        sel,
        items=tuple(replace(it, expr=_norm_expr(it.expr, scope, policy)) for it in sel.items),
        where=_norm_where(sel.where, scope, policy),
        order_by=tuple(replace(o, expr=_norm_expr(o.expr, scope, policy)) for o in sel.order_by),
    )


def _norm_value(table: str, column: q.Ident, value, scope, policy):
    if isinstance(value, q.Literal) and policy.is_nondeterministic(table, column.key):
        return ND
    return _norm_expr(value, scope, policy)


def normalize_ast(stmt: q.Statement, policy: NormalizationPolicy) -> q.Statement:
    """Replace literals bound to non-deterministic columns with a fixed placeholder."""
    if isinstance(stmt, q.Select):
        return _norm_select(stmt, policy)
    scope = _Scope.for_table(stmt.table)
    table = stmt.table.name.key
    if isinstance(stmt, q.Insert):
        if stmt.columns is None:
            raise q.UnsupportedSql("INSERT without column list")
        if stmt.query is not None:
            sub = _norm_select(stmt.query, policy)
            items = tuple(
                replace(it, expr=_norm_value(table, col, it.expr, scope, policy))
                for col, it in zip(stmt.columns, sub.items)
            )
            return replace(stmt, query=replace(sub, items=items))
        rows = tuple(
            tuple(_norm_value(table, col, v, scope, policy) for col, v in zip(stmt.columns, row))
            for row in stmt.rows
        )
        return replace(stmt, rows=rows)
    if isinstance(stmt, q.Update):
        assigns = tuple(
            q.Assignment(a.column, _norm_value(table, a.column, a.value, scope, policy))
            for a in stmt.assignments
        )
        return replace(stmt, assignments=assigns, where=_norm_where(stmt.where, scope, policy))
    if isinstance(stmt, q.Delete):
        return replace(stmt, where=_norm_where(stmt.where, scope, policy))
    raise TypeError(stmt)


def normalize(stmt: q.Statement, policy: NormalizationPolicy) -> str:
    return q.to_sql(normalize_ast(stmt, policy))


# ---------------------------------------------------------------------------
# matching

class MatchResult(enum.Enum):
    MATCH = "match"
    MISMATCH = "mismatch"
    SELECT_SKIP = "select-skip"


def match_queries(texts: Sequence[str], policy: NormalizationPolicy) -> MatchResult:
    """Unanimous vote over one query position.

    All-SELECT positions are only counted. Anything else must normalize to
    byte-identical text across every replica. A query that fails to parse
    or normalize is never trusted.
    """
    try:
        stmts = [q.parse_sql(t) for t in texts]
    except q.SqlError as exc:
        log.info("vote refused, unparseable query: %s", exc)
        return MatchResult.MISMATCH
    if all(isinstance(s, q.Select) for s in stmts):
        return MatchResult.SELECT_SKIP
    try:
        normalized = {normalize(s, policy) for s in stmts}
    except q.SqlError as exc:
        log.info("vote refused: %s", exc)
        return MatchResult.MISMATCH
    return MatchResult.MATCH if len(normalized) == 1 else MatchResult.MISMATCH


# ---------------------------------------------------------------------------
# vote queues

@dataclass(frozen=True)
class QueryEnvelope:
    source: str
    tag: RequestTag
    sql: str
    arrival: int
    sequence: int

    def __post_init__(self):
        if not self.sql:
            raise ValueError("empty SQL text")


@dataclass
class VoteQueue:
    id: int
    created_at: int
    cursor: int = 0
    slots: dict[int, dict[int, QueryEnvelope]] = field(default_factory=dict)
    sources: dict[int, str] = field(default_factory=dict)
    last_activity: int = 0

    def pending_since(self) -> Optional[int]:
        slot = self.slots.get(self.cursor)
        if not slot:
            return None
        return min(env.arrival for env in slot.values())


class Storage(Protocol):
    def execute(self, sql: str) -> Any: ...


@dataclass(frozen=True)
class Outcome:
    request_id: int


@dataclass(frozen=True)
class Forwarded(Outcome):
    position: int
    sql: str
    result: MatchResult
    response: Any
    recipients: tuple[str, ...]


@dataclass(frozen=True)
class Held(Outcome):
    position: int


@dataclass(frozen=True)
class Detected(Outcome):
    position: int
    replicas: tuple[ReplicaRef, ...]
    reason: str


@dataclass(frozen=True)
class DroppedStale(Outcome):
    reason: str


DetectHook = Callable[[Sequence[ReplicaRef], int], Any]


class VerificationProxy:
    """Stateful voter sitting between replicas and storage.

    ``on_detect`` is called with the offending replicas whenever a vote
    fails; in a full deployment it is the scheduler's immediate refresh.
    """

    def __init__(self, fleet: FleetState, key: TagKey, policy: NormalizationPolicy,
                 storage: Storage, on_detect: Optional[DetectHook] = None):
        self.fleet = fleet
        self.config = fleet.config
        self.key = key
        self.policy = policy
        self.storage = storage
        self.on_detect = on_detect
        self.queues: dict[int, VoteQueue] = {}
        self.closed: dict[int, int] = {}
        self.forwarded_log: list[str] = []
        self.outcomes: list[Outcome] = []

    def ingest(self, env: QueryEnvelope, now: int) -> Outcome:
        ref = self.fleet.lookup(env.source)
        if ref is None:
            raise UnknownSource(env.source)
        rid = env.tag.id
        if rid in self.closed:
            return self._record(DroppedStale(rid, "request id already closed"))
        queue = self.queues.get(rid)
        if queue is None:
            queue = self.queues[rid] = VoteQueue(rid, now, last_activity=now)
        queue.last_activity = now

        slot = queue.slots.setdefault(env.sequence, {})
        if env.sequence < queue.cursor or ref.pool in slot:
            return self._detect(queue, env.sequence, "duplicate query from pool "
                                f"{ref.pool} at position {env.sequence}", extra=[ref], now=now)
        slot[ref.pool] = env
        queue.sources.setdefault(ref.pool, env.source)

        # a vote can release queries that other replicas already sent ahead
        outcome: Optional[Outcome] = None
        while len(queue.slots.get(queue.cursor, ())) == self.config.n:
            result = self._record(self._vote(queue, now))
            if outcome is None:
                outcome = result
            if not isinstance(result, Forwarded):
                break
        if outcome is None:
            outcome = self._record(Held(rid, env.sequence))
        return outcome

    def _record(self, outcome: Outcome) -> Outcome:
        self.outcomes.append(outcome)
        return outcome

    def _vote(self, queue: VoteQueue, now: int) -> Outcome:
        pos = queue.cursor
        slot = queue.slots[pos]
        ordered = [slot[i] for i in range(1, self.config.n + 1)]
        addresses = [e.source for e in ordered]
        for env in ordered:
            verdict = verify_tag(env.tag, addresses, self.key, self.fleet.id_counter,
                                 self.config.tag_window)
            if verdict is not TagVerdict.ACCEPT:
                return self._detect(queue, pos, verdict.value, now=now, record=False)
        result = match_queries([e.sql for e in ordered], self.policy)
        if result is MatchResult.MISMATCH:
            return self._detect(queue, pos, "query mismatch", now=now, record=False)
        text = ordered[0].sql
        response = self.storage.execute(text)
        self.forwarded_log.append(text)
        del queue.slots[pos]
        queue.cursor += 1
        return Forwarded(queue.id, pos, text, result, response, tuple(addresses))

    def _detect(self, queue: VoteQueue, pos: int, reason: str, now: int,
                extra: Sequence[ReplicaRef] = (), record: bool = True) -> Detected:
        refs = {self.fleet.by_address[a].key: self.fleet.by_address[a]
                for a in queue.sources.values()}
        for slot in queue.slots.values():
            for env in slot.values():
                r = self.fleet.by_address[env.source]
                refs[r.key] = r
        for r in extra:
            refs[r.key] = r
        replicas = tuple(sorted(refs.values()))
        del self.queues[queue.id]
        self.closed[queue.id] = now
        log.warning("request %d rejected at position %d: %s", queue.id, pos, reason)
        outcome = Detected(queue.id, pos, replicas, reason)
        if self.on_detect is not None:
            self.on_detect(replicas, now)
        if record:
            self._record(outcome)
        return outcome

    def expire(self, now: int) -> list[int]:
        """Drop queues that waited ``queue_timeout`` for a missing query.

        Dropped queries are never forwarded and no replica is refreshed.
        Idle queues (nothing pending) are garbage-collected silently.
        """
        timeout = self.config.queue_timeout
        dropped = []
        for rid, queue in list(self.queues.items()):
            since = queue.pending_since()
            if since is not None:
                if now - since >= timeout:
                    dropped.append(rid)
                    del self.queues[rid]
                    self.closed[rid] = now
                    self._record(DroppedStale(rid, "queue timeout"))
            elif now - queue.last_activity >= timeout:
                del self.queues[rid]
        horizon = 4 * timeout
        for rid, when in list(self.closed.items()):
            if now - when >= horizon:
                del self.closed[rid]
        return sorted(dropped)
