import random
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, rule

from nmvariant.config import SystemConfig
from nmvariant.fleet import ReplicaState, new_fleet
from nmvariant.scheduler import (RequestAborted, SchedulerError, ServingSet, Unavailable,
                                 accumulate_refresh, admit, complete, refresh_now,
                                 select_serving_set, take_aborted, tick)
from nmvariant.tagging import TagKey, make_tag

KEY = TagKey(bytes(32))

# chi-square critical value, 24 degrees of freedom, upper tail 0.001
CHI2_24_999 = 51.179


def fleet_of(n, m, **kw):
    return new_fleet(SystemConfig(n=n, m=m, **kw))


class TestSelect:
    def test_forced(self, rng):
        fleet = fleet_of(2, 1)
        assert select_serving_set(fleet, rng).keys == ((1, 1), (2, 1))

    def test_unavailable_when_pool_empty(self, rng):
        fleet = fleet_of(2, 1)
        fleet.set_refreshing(fleet.refs[(2, 1)], 1000)
        with pytest.raises(Unavailable) as info:
            select_serving_set(fleet, rng)
        assert info.value.status_code == 503

    def test_skips_marked_and_refreshing(self, rng):
        fleet = fleet_of(2, 3)
        fleet.set_marked(fleet.refs[(1, 1)], 0)
        fleet.set_refreshing(fleet.refs[(1, 2)], 10)
        for _ in range(200):
            assert select_serving_set(fleet, rng).keys[0] == (1, 3)

    def test_uniform_per_pool(self):
        fleet = fleet_of(2, 25)
        rng = random.Random(2024)
        draws = 100_000
        counts = Counter()
        for _ in range(draws):
            for ref in select_serving_set(fleet, rng):
                counts[ref.key] += 1
        expected = draws / 25
        for pool in (1, 2):
            chi2 = sum((counts[(pool, j)] - expected) ** 2 / expected for j in range(1, 26))
            assert chi2 < CHI2_24_999

    def test_serving_set_validates_order(self):
        fleet = fleet_of(2, 2)
        with pytest.raises(ValueError):
            ServingSet((fleet.refs[(2, 1)], fleet.refs[(1, 1)]))


class TestAdmit:
    def test_first_ids(self, rng):
        fleet = fleet_of(2, 3)
        a = admit(fleet, KEY, rng)
        assert a.id == 0 and fleet.id_counter == 1
        b = admit(fleet, KEY, rng)
        assert b.id == 1

    def test_tag_binds_serving_set(self, rng):
        fleet = fleet_of(3, 4)
        req = admit(fleet, KEY, rng, now=7)
        assert req.tag == make_tag(req.id, req.serving_set.addresses, KEY)
        assert req.admitted_at == 7
        for ref in req.serving_set:
            st_ = fleet.status[ref.key]
            assert st_.in_flight == 1 and st_.served_since_refresh == 1

    def test_unavailable_consumes_no_id(self, rng):
        fleet = fleet_of(2, 3)
        for ref in fleet.pool(1):
            fleet.set_refreshing(ref, 1000)
        with pytest.raises(Unavailable):
            admit(fleet, KEY, rng)
        assert fleet.id_counter == 0
        assert not fleet.active


class TestComplete:
    def test_unmarked_stays_available(self, rng):
        fleet = fleet_of(2, 2)
        req = admit(fleet, KEY, rng)
        complete(fleet, req, 5)
        for ref in req.serving_set:
            assert fleet.state_of(ref) is ReplicaState.AVAILABLE
            assert fleet.status[ref.key].in_flight == 0

    def test_marked_member_refreshes_when_idle(self, rng):
        fleet = fleet_of(2, 2, refresh_duration=1000)
        req = admit(fleet, KEY, rng)
        member = req.serving_set.members[0]
        fleet.set_marked(member, 3)
        complete(fleet, req, 50)
        st_ = fleet.status[member.key]
        assert st_.state is ReplicaState.REFRESHING and st_.until == 1050

    def test_deferred_timeout_forces_refresh(self, rng):
        fleet = fleet_of(2, 2, refresh_duration=1000, deferred_timeout=10_000)
        req = admit(fleet, KEY, rng)
        member = req.serving_set.members[1]
        fleet.set_marked(member, 0)
        tick(fleet, 9_999)
        assert fleet.state_of(member) is ReplicaState.MARKED
        tick(fleet, 10_000)
        assert fleet.state_of(member) is ReplicaState.REFRESHING
        assert fleet.status[member.key].until == 11_000
        assert take_aborted(fleet) == {req.id}
        assert all(fleet.status[r.key].in_flight == 0 for r in req.serving_set)

    def test_double_completion(self, rng):
        fleet = fleet_of(2, 2)
        req = admit(fleet, KEY, rng)
        complete(fleet, req, 1)
        with pytest.raises(SchedulerError):
            complete(fleet, req, 2)

    def test_complete_after_abort(self, rng):
        fleet = fleet_of(2, 2)
        req = admit(fleet, KEY, rng)
        refresh_now(fleet, [req.serving_set.members[0]], 1)
        with pytest.raises(RequestAborted) as info:
            complete(fleet, req, 2)
        assert info.value.status_code >= 500
        with pytest.raises(SchedulerError):
            complete(fleet, req, 3)


class TestAccumulate:
    def test_half_rolling_sum(self, rng):
        fleet = fleet_of(2, 5, k="1/2")
        admit(fleet, KEY, rng)
        assert accumulate_refresh(fleet, rng) == []
        assert fleet.rolling_sum == Fraction(1, 2)
        admit(fleet, KEY, rng)
        assert len(accumulate_refresh(fleet, rng)) == 1
        assert fleet.rolling_sum == 0

    def test_k2_n4_marks_two_each(self, rng):
        fleet = fleet_of(4, 25, k=2)
        now = 0
        for _ in range(200):
            req = admit(fleet, KEY, rng, now)
            assert len(accumulate_refresh(fleet, rng, now)) == 2
            complete(fleet, req, now)
            now += 100
            tick(fleet, now)

    def test_k_point_three_over_ten_thousand(self, rng):
        fleet = fleet_of(2, 25, k=0.3)
        marks = 0
        now = 0
        for _ in range(10_000):
            req = admit(fleet, KEY, rng, now)
            marks += len(accumulate_refresh(fleet, rng, now))
            complete(fleet, req, now)
            now += 100
            tick(fleet, now)
        assert abs(marks - 3000) <= 1

    def test_only_served_available_replicas_are_eligible(self, rng):
        fleet = fleet_of(2, 5, k=3)
        req = admit(fleet, KEY, rng)
        marked = accumulate_refresh(fleet, rng)
        # only the two serving-set members have served anything
        assert sorted(r.key for r in marked) == sorted(req.serving_set.keys)

    def test_deficit_dropped_when_all_fresh(self, rng):
        fleet = fleet_of(2, 3, k=2)
        assert accumulate_refresh(fleet, rng) == []
        assert fleet.rolling_sum == 0

    def test_marks_idle_replica_straight_into_refresh(self, rng):
        fleet = fleet_of(1, 2, k=1)
        req = admit(fleet, KEY, rng)
        complete(fleet, req, 0)
        other = admit(fleet, KEY, rng, 1)
        marked = accumulate_refresh(fleet, rng, 1)
        assert len(marked) == 1
        ref = marked[0]
        expected = ReplicaState.MARKED if ref.key in other.serving_set.keys \
            else ReplicaState.REFRESHING
        assert fleet.state_of(ref) is expected

    @settings(max_examples=40, deadline=None)
    @given(st.fractions(min_value=0, max_value=2, max_denominator=50),
           st.integers(1, 400), st.integers(0, 1000))
    def test_budget_conservation(self, k, requests, seed):
        # k <= n: the fresh serving set alone always supplies floor(K) candidates
        fleet = fleet_of(2, 60, k=k, refresh_duration=1)
        rng = random.Random(seed)
        marks = 0
        now = 0
        for _ in range(requests):
            req = admit(fleet, KEY, rng, now)
            marks += len(accumulate_refresh(fleet, rng, now))
            complete(fleet, req, now)
            now += 10
            tick(fleet, now)
        assert marks + fleet.rolling_sum == k * requests


class TestRefreshNow:
    def test_whole_set_refreshes(self, rng):
        fleet = fleet_of(2, 3)
        req = admit(fleet, KEY, rng)
        aborted = refresh_now(fleet, req.serving_set.members, 10)
        assert [a.id for a in aborted] == [req.id]
        for ref in req.serving_set:
            assert fleet.state_of(ref) is ReplicaState.REFRESHING
            assert fleet.status[ref.key].in_flight == 0

    def test_already_refreshing_left_alone(self, rng):
        fleet = fleet_of(2, 3)
        a, b = fleet.refs[(1, 1)], fleet.refs[(2, 1)]
        fleet.set_refreshing(a, 500)
        refresh_now(fleet, [a, b], 10)
        assert fleet.status[a.key].until == 500
        assert fleet.state_of(b) is ReplicaState.REFRESHING

    def test_collateral_abort(self):
        fleet = fleet_of(2, 1)
        rng = random.Random(0)
        first = admit(fleet, KEY, rng)
        second = admit(fleet, KEY, rng)
        aborted = refresh_now(fleet, [fleet.refs[(1, 1)]], 5)
        assert {r.id for r in aborted} == {first.id, second.id}
        # the surviving member is released by both aborts
        assert fleet.status[(2, 1)].in_flight == 0


class TestTick:
    def test_restore_boundary(self):
        fleet = fleet_of(1, 1, refresh_duration=1000)
        ref = fleet.refs[(1, 1)]
        fleet.note_served(ref)
        fleet.status[ref.key].in_flight = 0
        fleet.set_refreshing(ref, 1000)
        assert tick(fleet, 999) == []
        assert tick(fleet, 1000) == [ref]
        assert fleet.status[ref.key].served_since_refresh == 0
        assert tick(fleet, 1001) == []

    def test_refreshing_with_in_flight_refused(self, rng):
        fleet = fleet_of(1, 1)
        admit(fleet, KEY, rng)
        with pytest.raises(AssertionError):
            fleet.set_refreshing(fleet.refs[(1, 1)], 10)


class FleetMachine(RuleBasedStateMachine):
    """Random interleavings of every scheduler operation."""

    def __init__(self):
        super().__init__()
        self.fleet = fleet_of(2, 3, k="3/2", refresh_duration=40, deferred_timeout=100)
        self.rng = random.Random(0)
        self.now = 0
        self.open = []

    @rule()
    def admit_one(self):
        try:
            req = admit(self.fleet, KEY, self.rng, self.now)
        except Unavailable:
            return
        for ref in req.serving_set:
            assert self.fleet.state_of(ref) is ReplicaState.AVAILABLE
        accumulate_refresh(self.fleet, self.rng, self.now)
        self.open.append(req)

    @rule(i=st.integers(0, 50))
    def complete_one(self, i):
        if not self.open:
            return
        req = self.open.pop(i % len(self.open))
        try:
            complete(self.fleet, req, self.now)
        except RequestAborted:
            pass

    @rule(i=st.integers(0, 5))
    def detect(self, i):
        if self.open:
            refresh_now(self.fleet, self.open[i % len(self.open)].serving_set.members, self.now)

    @rule(dt=st.integers(1, 60))
    def advance(self, dt):
        self.now += dt
        tick(self.fleet, self.now)

    @invariant()
    def refreshing_replicas_are_idle(self):
        for st_ in self.fleet.status.values():
            if st_.state is ReplicaState.REFRESHING:
                assert st_.in_flight == 0
            assert st_.in_flight >= 0

    @invariant()
    def in_flight_matches_active(self):
        load = Counter(k for r in self.fleet.active.values() for k in r.serving_set.keys)
        for key, st_ in self.fleet.status.items():
            assert st_.in_flight == load[key]


TestFleetMachine = FleetMachine.TestCase
TestFleetMachine.settings = settings(max_examples=60, stateful_step_count=60, deadline=None)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.lists(st.booleans(), min_size=1, max_size=80),
       st.integers(0, 10_000))
def test_full_refresh_means_single_use(n, m, ops, seed):
    """With k = n each replica serves at most one request between refreshes."""
    fleet = fleet_of(n, m, k=n, refresh_duration=30)
    rng = random.Random(seed)
    now, open_ = 0, []
    for do_admit in ops:
        if do_admit:
            try:
                req = admit(fleet, KEY, rng, now)
            except Unavailable:
                pass
            else:
                for ref in req.serving_set:
                    assert fleet.status[ref.key].served_since_refresh == 1
                accumulate_refresh(fleet, rng, now)
                open_.append(req)
        elif open_:
            complete(fleet, open_.pop(0), now)
        now += 7
        tick(fleet, now)
