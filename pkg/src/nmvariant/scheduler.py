"""Scheduling proxy: serving-set selection, admission and the refresh controller.

Every function here mutates a :class:`~nmvariant.fleet.FleetState` and is
meant to be called by a single owner in event order.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from typing import Iterable

from .fleet import ID_MODULUS, FleetState, ReplicaRef, ReplicaState
from .tagging import RequestTag, TagKey, make_tag

log = logging.getLogger(__name__)


class Unavailable(Exception):
    """No serving set can be formed; surfaces as HTTP 503."""

    status_code = 503


class RequestAborted(Exception):
    """The request lost a serving-set member to an immediate refresh."""

    status_code = 502


class SchedulerError(RuntimeError):
    pass


@dataclass(frozen=True)
class ServingSet:
    members: tuple[ReplicaRef, ...]

    def __post_init__(self):
        pools = [r.pool for r in self.members]
        if pools != list(range(1, len(pools) + 1)):
            raise ValueError(f"serving set must hold one replica per pool in order, got {pools}")

    @property
    def addresses(self) -> list[str]:
        return [r.address for r in self.members]

    @property
    def keys(self) -> tuple[tuple[int, int], ...]:
        return tuple(r.key for r in self.members)

    def __iter__(self):
        return iter(self.members)

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class AdmittedRequest:
    id: int
    serving_set: ServingSet
    tag: RequestTag
    admitted_at: int


def select_serving_set(fleet: FleetState, rng: random.Random) -> ServingSet:
    """Pick one available replica uniformly from each pool.

    Drawing from the available set directly is the same distribution as
    redrawing until an available replica comes up, without the unbounded loop.
    """
    members = []
    for i in range(1, fleet.config.n + 1):
        bag = fleet.available_in_pool(i)
        if not len(bag):
            raise Unavailable(f"pool {i} has no available replica")
        members.append(bag.choice(rng))
    return ServingSet(tuple(members))


def admit(fleet: FleetState, key: TagKey, rng: random.Random, now: int = 0) -> AdmittedRequest:
    serving_set = select_serving_set(fleet, rng)
    request_id = fleet.id_counter
    fleet.id_counter = (fleet.id_counter + 1) % ID_MODULUS
    tag = make_tag(request_id, serving_set.addresses, key)
    for ref in serving_set:
        fleet.note_served(ref)
    request = AdmittedRequest(request_id, serving_set, tag, now)
    fleet.active[request_id] = request
    fleet.log(now, "admit", request_id, serving_set)
    return request


def _release(fleet: FleetState, request: AdmittedRequest, now: int,
             skip: Iterable[ReplicaRef] = ()) -> None:
    skip_keys = {r.key for r in skip}
    for ref in request.serving_set:
        st = fleet.status[ref.key]
        st.in_flight -= 1
        if ref.key in skip_keys:
            continue
        if st.state is ReplicaState.MARKED and st.in_flight == 0:
            fleet.set_refreshing(ref, now + fleet.config.refresh_duration)
            fleet.log(now, "refresh", request.id, [ref], "periodic")


def complete(fleet: FleetState, request: AdmittedRequest, now: int) -> None:
    """Finish ``request``; marked members with nothing left in flight start refreshing."""
    if request.id in fleet.aborted and request.id not in fleet.active:
        fleet.aborted.discard(request.id)
        raise RequestAborted(f"request {request.id} was aborted by a refresh")
    if fleet.active.get(request.id) is not request:
        raise SchedulerError(f"request {request.id} is not in flight (double completion?)")
    del fleet.active[request.id]
    _release(fleet, request, now)
    fleet.log(now, "complete", request.id, request.serving_set)


def accumulate_refresh(fleet: FleetState, rng: random.Random, now: int = 0) -> list[ReplicaRef]:
    """Add k to the rolling sum and mark floor(K) replicas for periodic refresh.

    Candidates come from the whole fleet regardless of pool and must be
    available and have served at least one request since their last refresh.
    When there are too few candidates the shortfall is dropped, not carried.
    """
    due = fleet.refresh_sum.step()
    if not due:
        return []
    pool = fleet.refreshable()
    marked = []
    for _ in range(min(due, len(pool))):
        ref = pool.choice(rng)
        fleet.set_marked(ref, now)
        marked.append(ref)
    if len(marked) < due:
        log.debug("refresh shortfall: wanted %d, marked %d", due, len(marked))
    if marked:
        fleet.log(now, "mark", None, marked)
    for ref in marked:
        if fleet.status[ref.key].in_flight == 0:
            fleet.set_refreshing(ref, now + fleet.config.refresh_duration)
            fleet.log(now, "refresh", None, [ref], "periodic")
    return marked


def _abort_touching(fleet: FleetState, victims: set[tuple[int, int]], now: int,
                    reason: str) -> list[AdmittedRequest]:
    hit = [req for req in fleet.active.values()
           if any(ref.key in victims for ref in req.serving_set)]
    victim_refs = [fleet.refs[k] for k in victims]
    for req in hit:
        del fleet.active[req.id]
        fleet.aborted.add(req.id)
        _release(fleet, req, now, skip=victim_refs)
        fleet.log(now, "abort", req.id, req.serving_set, reason)
    return hit


def refresh_now(fleet: FleetState, members: Iterable[ReplicaRef], now: int) -> list[AdmittedRequest]:
    """Immediately refresh ``members``, aborting every request that uses one of them.

    Returns the aborted requests. Members already refreshing are left alone.
    """
    targets = [ref for ref in members if fleet.state_of(ref) is not ReplicaState.REFRESHING]
    aborted = _abort_touching(fleet, {r.key for r in targets}, now, "detection")
    for ref in targets:
        fleet.set_refreshing(ref, now + fleet.config.refresh_duration)
    if targets:
        fleet.log(now, "refresh", None, targets, "detection")
    return aborted


def tick(fleet: FleetState, now: int) -> list[ReplicaRef]:
    """Advance refresh timers to ``now`` and return the replicas brought back online.

    Marked replicas that outlived the deferred timeout are forced into
    refresh first, aborting whatever they still had in flight.
    """
    for ref, since in fleet.overdue_marks(now):
        deadline = since + fleet.config.deferred_timeout
        _abort_touching(fleet, {ref.key}, now, "deferred-timeout")
        fleet.set_refreshing(ref, deadline + fleet.config.refresh_duration)
        fleet.log(now, "refresh", None, [ref], "deferred-timeout")
    restored = fleet.due_refreshes(now)
    for ref in restored:
        fleet.set_available(ref)
    if restored:
        fleet.log(now, "restore", None, restored)
    return restored


def take_aborted(fleet: FleetState) -> set[int]:
    """Drain and return ids of requests aborted since the last call."""
    out = set(fleet.aborted)
    fleet.aborted.clear()
    return out
