import io
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmvariant.config import SystemConfig
from nmvariant.harness import (DEFAULT_APP, DivergentWrite, ForgedTag, HarnessError, Honest,
                               Load, LoopbackWire, ReplayTag, Scenario, ScriptError, Silent,
                               goodput_trend, inject, is_write, load_script, run_scenario,
                               script_from_mapping, summarize, write_metrics_csv,
                               write_trend_csv)
from nmvariant.tagging import RequestTag, decode_option
from nmvariant.verifier import Detected, Forwarded, MatchResult

PAYLOAD = "DELETE FROM page"
WRITES_PER_EDIT = sum(is_write(t.format(ts=1, page=1, title="x", text="y"))
                      for t in DEFAULT_APP["/edit"])


def requests(path="/edit", count=100, every=50, at=0):
    return {"action": "request", "at": at, "path": path, "repeat": count, "every": every}


def injection(replica, behavior="divergent-write", at=0, **kw):
    ev = {"action": "inject", "at": at, "replica": replica, "behavior": behavior}
    if behavior == "divergent-write":
        ev["payload"] = kw.get("payload", PAYLOAD)
    return ev


def scenario(cfg, events, seed=0, **kw):
    return Scenario(cfg, script_from_mapping({"event": events}, cfg), seed, **kw)


def forwarded_writes(proxy):
    return [o.sql for o in proxy.outcomes
            if isinstance(o, Forwarded) and o.result is MatchResult.MATCH]


class TestScenarios:
    def test_honest_baseline(self):
        cfg = SystemConfig(n=2, m=2, k=0)
        scen = scenario(cfg, [requests(count=100)])
        m = scen.run()
        assert m.detections == 0
        assert m.ok_responses == m.requests_sent == 100
        assert m.forwarded_writes == 100 * WRITES_PER_EDIT == len(scen.store.writes)
        assert scen.store.writes == forwarded_writes(scen.proxy)
        assert m.conserved() and m.in_flight == 0

    def test_divergent_replica_detected_and_refreshed(self):
        cfg = SystemConfig(n=2, m=2, k=0)
        scen = scenario(cfg, [injection("1.1"), requests(count=30)])
        m = scen.run()
        assert m.detections == 1
        det = next(o for o in scen.proxy.outcomes if isinstance(o, Detected))
        victim = scen.fleet.active.get(det.request_id)
        assert victim is None
        # the detected request was the first through (1,1)
        first = next(e for e in scen.fleet.events
                     if e.kind == "admit" and (1, 1) in e.replicas)
        assert det.request_id == first.request_id
        refresh = next(e for e in scen.fleet.events
                       if e.kind == "refresh" and e.detail == "detection")
        assert set(refresh.replicas) == set(first.replicas)
        assert PAYLOAD not in scen.store.log
        assert m.forwarded_writes == (m.requests_sent - 1) * WRITES_PER_EDIT
        assert m.aborted == 1 and m.conserved()

    def test_detection_at_its_own_position(self):
        cfg = SystemConfig(n=3, m=2)
        scen = scenario(cfg, [injection("2.2"), requests(count=20)])
        scen.run()
        first_write = next(i for i, t in enumerate(DEFAULT_APP["/edit"])
                           if is_write(t.format(ts=1, page=1, title="x", text="y")))
        dets = [o for o in scen.proxy.outcomes if isinstance(o, Detected)]
        assert dets and all(d.position == first_write for d in dets)
        for d in dets:
            assert not any(isinstance(o, Forwarded) and o.request_id == d.request_id
                           and o.position >= d.position for o in scen.proxy.outcomes)

    def test_single_replica_pools_full_refresh(self):
        cfg = SystemConfig(n=2, m=1, k=2, refresh_duration=1000)
        scen = scenario(cfg, [requests("/view", count=1, at=0),
                              requests("/view", count=1, at=500),
                              requests("/view", count=1, at=2000)])
        m = scen.run()
        assert (m.ok_responses, m.unavailable_503) == (2, 1)
        refreshed = [e for e in scen.fleet.events if e.kind == "refresh"]
        assert {r for e in refreshed for r in e.replicas} == {(1, 1), (2, 1)}

    def test_single_variant_cannot_vote(self):
        # with one pool there is no peer to disagree, so divergence goes through
        cfg = SystemConfig(n=1, m=1)
        scen = scenario(cfg, [injection("1.1"), requests(count=1)])
        m = scen.run()
        assert m.detections == 0 and PAYLOAD in scen.store.log

    def test_forged_tag(self):
        cfg = SystemConfig(n=2, m=1)
        scen = scenario(cfg, [injection("2.1", "forged-tag"), requests("/view", count=1)])
        m = scen.run()
        det = [o for o in scen.proxy.outcomes if isinstance(o, Detected)]
        assert m.detections == 1 and det[0].reason == "reject-forged"
        assert scen.store.log == []

    def test_silent_replica_times_out(self):
        cfg = SystemConfig(n=2, m=1, queue_timeout=300)
        scen = scenario(cfg, [injection("1.1", "silent"), requests("/edit", count=2, every=1000)])
        m = scen.run()
        assert m.timed_out == 2 and m.detections == 0 and scen.store.log == []
        assert m.refreshes_detection == 0 and m.conserved()

    def test_replay_tag_never_reaches_store_twice(self):
        cfg = SystemConfig(n=2, m=1, queue_timeout=300)
        scen = scenario(cfg, [injection("1.1", "replay-tag"),
                              requests("/edit", count=4, every=1000)])
        m = scen.run()
        # first request is honest, later ones carry the captured id
        assert m.ok_responses >= 1 and m.conserved()
        assert len(scen.store.writes) == m.ok_responses * WRITES_PER_EDIT

    def test_deterministic(self):
        cfg = SystemConfig(n=3, m=4, k="3/2")
        events = [injection("1.2"), requests(count=60, every=7), requests("/view", count=60)]
        a, b = scenario(cfg, events, seed=5), scenario(cfg, events, seed=5)
        assert a.run() == b.run()
        assert a.store.log == b.store.log and a.fleet.events == b.fleet.events

    def test_loopback_matches_in_process(self):
        cfg = SystemConfig(n=2, m=2, k=1)
        events = [injection("2.1", at=300), requests(count=20, every=40)]
        local = scenario(cfg, events, seed=3)
        with LoopbackWire() as wire:
            remote = scenario(cfg, events, seed=3, wire=wire)
            m_remote = remote.run()
        m_local = local.run()
        assert m_remote == m_local
        assert remote.store.log == local.store.log

    def test_wire_frame_layout(self):
        tag = RequestTag(9, bytes(range(32)))
        frame = LoopbackWire.frame(tag, "SELECT 1")
        assert decode_option(frame[:40]) == tag
        assert frame[40:44] == (8).to_bytes(4, "big") and frame[44:] == b"SELECT 1"


class TestInject:
    def test_refresh_restores_honest(self):
        cfg = SystemConfig(n=2, m=2)
        scen = scenario(cfg, [])
        inject(scen.mocks, (1, 2), ForgedTag())
        assert isinstance(scen.mocks[(1, 2)].behavior, ForgedTag)
        from nmvariant.scheduler import refresh_now
        refresh_now(scen.fleet, [scen.fleet.refs[(1, 2)]], 0)
        scen._sync_refreshes()
        assert isinstance(scen.mocks[(1, 2)].behavior, Honest)

    def test_unknown_replica(self):
        scen = scenario(SystemConfig(n=2, m=2), [])
        with pytest.raises(HarnessError):
            inject(scen.mocks, (3, 1), Silent())

    def test_same_pool_pair(self):
        scen = scenario(SystemConfig(n=2, m=3), [])
        inject(scen.mocks, (1, 1), DivergentWrite(PAYLOAD))
        inject(scen.mocks, scen.fleet.refs[(1, 2)], DivergentWrite(PAYLOAD))
        assert all(isinstance(scen.mocks[(1, j)].behavior, DivergentWrite) for j in (1, 2))
        assert isinstance(scen.mocks[(1, 3)].behavior, Honest)

    def test_divergent_read_only_request(self):
        scen = scenario(SystemConfig(n=1, m=1), [])
        mock = scen.mocks[(1, 1)]
        mock.behavior = DivergentWrite(PAYLOAD)
        from nmvariant.harness import ClientRequest
        out = mock.queries(ClientRequest("/view", {"page": 1, "title": "t", "text": ""}))
        assert out[-1] == PAYLOAD

    def test_replay_captures_first_tag(self):
        scen = scenario(SystemConfig(n=1, m=1), [])
        mock = scen.mocks[(1, 1)]
        mock.behavior = ReplayTag()
        first, second = RequestTag(1, bytes(32)), RequestTag(2, bytes(32))
        assert mock.tag_for(first) == first
        assert mock.tag_for(second) == first


class TestScripts:
    @pytest.mark.parametrize("doc,match", [
        ({"event": [{"action": "dance", "at": 0}]}, "unknown action"),
        ({"event": [{"action": "request", "at": -1}]}, "'at'"),
        ({"event": [{"action": "request", "at": 0, "path": "/nope"}]}, "unknown path"),
        ({"event": [{"action": "request", "at": 0, "colour": 1}]}, "unknown keys"),
        ({"event": [{"action": "inject", "at": 0, "replica": "9.9",
                     "behavior": "silent"}]}, "no replica"),
        ({"event": [{"action": "inject", "at": 0, "replica": "x",
                     "behavior": "silent"}]}, "pool.index"),
        ({"event": [{"action": "inject", "at": 0, "replica": "1.1",
                     "behavior": "evil"}]}, "unknown behavior"),
        ({"event": [{"action": "inject", "at": 0, "replica": "1.1",
                     "behavior": "divergent-write"}]}, "payload"),
        ({"event": [{"action": "clients", "at": 10, "until": 5}]}, "precedes"),
        ({"timing": {"warp": 1}}, "unknown timing"),
        ({"app": {"/x": []}}, "non-empty"),
        ({"extra": {}}, "unknown script sections"),
    ])
    def test_rejected_before_running(self, doc, match):
        with pytest.raises(ScriptError, match=match):
            script_from_mapping(doc, SystemConfig(n=2, m=2))

    def test_load_from_file(self, tmp_path):
        p = tmp_path / "s.toml"
        p.write_text('[timing]\nbase_ms = 3\n\n[[event]]\nat = 0\naction = "request"\n'
                     'path = "/edit"\nrepeat = 5\nevery = 10\n')
        script = load_script(p)
        assert script.timing.base_ms == 3 and len(script.events) == 1
        m = run_scenario(SystemConfig(n=2, m=2), script)
        assert m.ok_responses == 5

    def test_malformed_file(self, tmp_path):
        p = tmp_path / "s.toml"
        p.write_text("[[event]\n")
        with pytest.raises(ScriptError, match="malformed"):
            load_script(p)

    def test_custom_app(self):
        doc = {"app": {"/ping": ["DELETE FROM page WHERE page_id = {page}"]},
               "event": [{"action": "request", "at": 0, "path": "/ping", "repeat": 3}]}
        m = run_scenario(SystemConfig(n=2, m=2), doc)
        assert m.forwarded_writes == 3


class TestMetricsOutput:
    def test_csv_and_summary(self):
        m = run_scenario(SystemConfig(n=2, m=2), {"event": [requests(count=3)]})
        buf = io.StringIO()
        write_metrics_csv([m], buf)
        header, row = buf.getvalue().splitlines()
        assert header.startswith("requests_sent,ok_responses,unavailable_503")
        assert row.startswith("3,3,0")
        assert "goodput" in summarize(m)


class TestGoodput:
    def test_single_replica_pools_overloaded(self):
        load = Load(clients=4, duration_ms=3000)
        (point,) = goodput_trend([SystemConfig(n=2, m=1, k=2)], load, seed=0)
        assert point.metrics.unavailable_503 > 0
        assert point.k_over_n == 1

    def test_refresh_lowers_goodput(self):
        load = Load(clients=4, duration_ms=3000)
        pts = goodput_trend([SystemConfig(n=2, m=10, k=Fraction(x) * 2) for x in (0, 1)], load)
        assert pts[0].goodput > pts[1].goodput
        buf = io.StringIO()
        write_trend_csv(pts, buf)
        assert buf.getvalue().splitlines()[0].startswith("n,m,k,k_over_n,goodput")


behaviors = st.sampled_from([
    {"behavior": "divergent-write", "payload": PAYLOAD},
    {"behavior": "divergent-write", "payload": "UPDATE page SET page_id = 0"},
    {"behavior": "forged-tag"}, {"behavior": "silent"}, {"behavior": "replay-tag"},
    {"behavior": "honest"},
])


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 3), m=st.integers(1, 3), k=st.sampled_from(["0", "1/2", "1", "2"]),
       seed=st.integers(0, 1000),
       injects=st.lists(st.tuples(st.integers(0, 2000), st.integers(1, 3), st.integers(1, 3),
                                  behaviors), max_size=5))
def test_store_integrity_and_conservation(n, m, k, seed, injects):
    cfg = SystemConfig(n=n, m=m, k=k, queue_timeout=400, refresh_duration=200)
    events = [requests("/edit", count=40, every=30), requests("/view", count=40, every=45)]
    for at, i, j, beh in injects:
        if i <= n and j <= m:
            events.append({"action": "inject", "at": at, "replica": f"{i}.{j}", **beh})
    scen = scenario(cfg, events, seed=seed)
    metrics = scen.run()
    assert metrics.conserved() and metrics.in_flight == 0
    assert scen.store.writes == forwarded_writes(scen.proxy)
    assert PAYLOAD not in scen.store.log
    assert "UPDATE page SET page_id = 0" not in scen.store.log
