"""Fleet model: replica identities, per-replica status and the shared fleet state.

All status transitions go through :class:`FleetState` helpers so that the
indices used for fast selection (available replicas per pool, replicas
eligible for periodic refresh) never drift from the status table.
"""

from __future__ import annotations

import csv
import enum
import heapq
import ipaddress
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Generic, Iterable, Iterator, TextIO, TypeVar

from .config import ConfigError, Rational, SystemConfig, as_fraction

if TYPE_CHECKING:
    from .scheduler import AdmittedRequest

ID_MODULUS = 1 << 32
MAX_SERVING_SETS = (1 << 63) - 1

T = TypeVar("T")


class ManualClock:
    """Logical millisecond clock that only moves when told to."""

    def __init__(self, start: int = 0):
        self._now = start

    def now(self) -> int:
        return self._now

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("clock cannot run backwards")
        self._now += ms
        return self._now

    def set(self, t: int) -> int:
        if t < self._now:
            raise ValueError(f"clock cannot run backwards ({t} < {self._now})")
        self._now = t
        return self._now


class RollingSum:
    """Exact accumulator that fires whole units and carries the remainder.

    >>> acc = RollingSum("1/2")
    >>> [acc.step() for _ in range(4)]
    [0, 1, 0, 1]
    """

    def __init__(self, increment: Rational, value: Rational = 0):
        self.increment = as_fraction(increment)
        self.value = as_fraction(value)
        if self.increment < 0:
            raise ValueError("increment must be non-negative")

    def step(self) -> int:
        self.value += self.increment
        whole = self.value.numerator // self.value.denominator
        self.value -= whole
        return whole

    def __repr__(self):
        return f"RollingSum(increment={self.increment}, value={self.value})"


class IndexedSet(Generic[T]):
    """Set with O(1) add, remove and uniform random choice."""

    def __init__(self, items: Iterable[T] = ()):
        self._items: list[T] = []
        self._pos: dict[T, int] = {}
        for item in items:
            self.add(item)

    def add(self, item: T) -> None:
        if item not in self._pos:
            self._pos[item] = len(self._items)
            self._items.append(item)

    def discard(self, item: T) -> None:
        idx = self._pos.pop(item, None)
        if idx is None:
            return
        last = self._items.pop()
        if idx < len(self._items):
            self._items[idx] = last
            self._pos[last] = idx

    def choice(self, rng: random.Random) -> T:
        return self._items[rng.randrange(len(self._items))]

    def __contains__(self, item) -> bool:
        return item in self._pos

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[T]:
        return iter(list(self._items))


@dataclass(frozen=True, order=True)
class ReplicaRef:
    pool: int
    index: int
    address: str = field(compare=False)

    @property
    def key(self) -> tuple[int, int]:
        return (self.pool, self.index)

    def __str__(self):
        return f"S{self.pool},{self.index}@{self.address}"


class ReplicaState(enum.Enum):
    AVAILABLE = "available"
    MARKED = "marked"
    REFRESHING = "refreshing"


@dataclass
class ReplicaStatus:
    state: ReplicaState = ReplicaState.AVAILABLE
    since: int | None = None   # when marked
    until: int | None = None   # when a refresh completes
    in_flight: int = 0
    served_since_refresh: int = 0


@dataclass(frozen=True)
class Event:
    time: int
    kind: str
    request_id: int | None = None
    replicas: tuple[tuple[int, int], ...] = ()
    detail: str = ""


EVENT_FIELDS = ("time", "event", "request_id", "replicas", "detail")


def write_event_log(events: Iterable[Event], fh: TextIO) -> None:
    """Write events as CSV; replicas are ``pool.index`` joined by ``;``."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(EVENT_FIELDS)
    for ev in events:
        writer.writerow([
            ev.time,
            ev.kind,
            "" if ev.request_id is None else ev.request_id,
            ";".join(f"{p}.{j}" for p, j in ev.replicas),
            ev.detail,
        ])


def read_event_log(fh: TextIO) -> list[Event]:
    rows = csv.DictReader(fh)
    out = []
    for row in rows:
        reps = tuple(
            tuple(int(x) for x in item.split(".")) for item in row["replicas"].split(";") if item
        )
        out.append(Event(
            time=int(row["time"]),
            kind=row["event"],
            request_id=int(row["request_id"]) if row["request_id"] else None,
            replicas=reps,  # type: ignore[arg-type]
            detail=row["detail"],
        ))
    return out


def address_for(pool: int, index: int, m: int, base: str = "10.0.0.0") -> str:
    """Deterministic IPv4 address for replica ``(pool, index)``.

    Pools occupy consecutive blocks of 256 addresses (larger blocks when
    ``m`` > 255), so with the default base replica (2, 1) is 10.0.1.1.
    """
    stride = 256
    while stride <= m:
        stride *= 2
    offset = (pool - 1) * stride + index
    net = ipaddress.IPv4Address(base)
    try:
        return str(net + offset)
    except ipaddress.AddressValueError as exc:
        raise ConfigError(f"address space exhausted for replica ({pool}, {index})") from exc


class FleetState:
    """Status of all n*m replicas, the refresh rolling sum and the request counter.

    One owner mutates this object at a time; see :mod:`nmvariant.scheduler`
    for the operations. ``events`` is an append-only log of transitions,
    left empty when ``record_events`` is false.
    """

    def __init__(self, config: SystemConfig, address_base: str = "10.0.0.0",
                 record_events: bool = True):
        self.config = config
        self.record_events = record_events
        self.refs: dict[tuple[int, int], ReplicaRef] = {}
        self.status: dict[tuple[int, int], ReplicaStatus] = {}
        self.by_address: dict[str, ReplicaRef] = {}
        for i in range(1, config.n + 1):
            for j in range(1, config.m + 1):
                ref = ReplicaRef(i, j, address_for(i, j, config.m, address_base))
                self.refs[ref.key] = ref
                self.status[ref.key] = ReplicaStatus()
                self.by_address[ref.address] = ref
        self.refresh_sum = RollingSum(config.k)
        self.id_counter = 0
        self.active: dict[int, AdmittedRequest] = {}
        self.aborted: set[int] = set()
        self.events: list[Event] = []
        self._available = {
            i: IndexedSet(self.refs[(i, j)] for j in range(1, config.m + 1))
            for i in range(1, config.n + 1)
        }
        self._refreshable: IndexedSet[ReplicaRef] = IndexedSet()
        self._refresh_heap: list[tuple[int, int, int]] = []
        self._marked: dict[tuple[int, int], int] = {}

    # -- read side --------------------------------------------------------

    @property
    def rolling_sum(self) -> Fraction:
        return self.refresh_sum.value

    def replicas(self) -> list[ReplicaRef]:
        return list(self.refs.values())

    def pool(self, i: int) -> list[ReplicaRef]:
        return [self.refs[(i, j)] for j in range(1, self.config.m + 1)]

    def state_of(self, ref: ReplicaRef | tuple[int, int]) -> ReplicaState:
        key = ref.key if isinstance(ref, ReplicaRef) else ref
        return self.status[key].state

    def available_in_pool(self, i: int) -> IndexedSet[ReplicaRef]:
        return self._available[i]

    def refreshable(self) -> IndexedSet[ReplicaRef]:
        return self._refreshable

    def lookup(self, address: str) -> ReplicaRef | None:
        return self.by_address.get(address)

    def snapshot(self) -> dict[tuple[int, int], ReplicaStatus]:
        return {key: ReplicaStatus(**vars(st)) for key, st in self.status.items()}

    def counts(self) -> dict[ReplicaState, int]:
        out = {s: 0 for s in ReplicaState}
        for st in self.status.values():
            out[st.state] += 1
        return out

    # -- transitions ------------------------------------------------------

    def log(self, now: int, kind: str, request_id: int | None = None,
            replicas: Iterable[ReplicaRef] = (), detail: str = "") -> None:
        if self.record_events:
            self.events.append(Event(now, kind, request_id, tuple(r.key for r in replicas), detail))

    def note_served(self, ref: ReplicaRef) -> None:
        st = self.status[ref.key]
        st.in_flight += 1
        st.served_since_refresh += 1
        if st.state is ReplicaState.AVAILABLE:
            self._refreshable.add(ref)

    def set_marked(self, ref: ReplicaRef, now: int) -> None:
        st = self.status[ref.key]
        st.state = ReplicaState.MARKED
        st.since = now
        st.until = None
        self._available[ref.pool].discard(ref)
        self._refreshable.discard(ref)
        self._marked[ref.key] = now

    def set_refreshing(self, ref: ReplicaRef, until: int) -> None:
        st = self.status[ref.key]
        if st.in_flight:
            raise AssertionError(f"{ref} cannot refresh with {st.in_flight} requests in flight")
        st.state = ReplicaState.REFRESHING
        st.since = None
        st.until = until
        self._available[ref.pool].discard(ref)
        self._refreshable.discard(ref)
        self._marked.pop(ref.key, None)
        heapq.heappush(self._refresh_heap, (until, ref.pool, ref.index))

    def set_available(self, ref: ReplicaRef) -> None:
        st = self.status[ref.key]
        st.state = ReplicaState.AVAILABLE
        st.since = st.until = None
        st.served_since_refresh = 0
        self._available[ref.pool].add(ref)
        self._refreshable.discard(ref)

    def due_refreshes(self, now: int) -> list[ReplicaRef]:
        """Pop replicas whose refresh window has ended by ``now``."""
        due = []
        while self._refresh_heap and self._refresh_heap[0][0] <= now:
            until, i, j = heapq.heappop(self._refresh_heap)
            st = self.status[(i, j)]
            # stale heap entries are skipped
            if st.state is ReplicaState.REFRESHING and st.until == until:
                due.append(self.refs[(i, j)])
        return due

    def overdue_marks(self, now: int) -> list[tuple[ReplicaRef, int]]:
        limit = self.config.deferred_timeout
        return [
            (self.refs[key], since) for key, since in sorted(self._marked.items())
            if since + limit <= now
        ]


def new_fleet(config: SystemConfig, address_base: str = "10.0.0.0") -> FleetState:
    """Create a fleet with every replica available, K = 0 and the counter at 0."""
    return FleetState(config, address_base)


def count_serving_sets(config: SystemConfig) -> int:
    """Number of distinct serving sets, m**n."""
    total = config.m ** config.n
    if total > MAX_SERVING_SETS:
        raise OverflowError(f"m**n = {config.m}**{config.n} does not fit in 63 bits")
    return total
