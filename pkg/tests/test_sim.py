"""The discrete-event engine: ordering, latency, fault injection and the
search step accounting with its closed-form bound."""
import pytest

from disthash.core import LocalityDescriptor, NodeId
from disthash.sim import (MS, NetworkModel, NotCrashed, SendFailed,
                          Simulator, StepCounter, UnknownNode,
                          UnknownRequest, formula_bound, ideal_search_steps)


def loc(net="n1", asd="as1", country="ro", continent="eu"):
    return LocalityDescriptor(net, asd, country, continent)


class Recorder:
    """Minimal node: logs every delivery and timer."""

    def __init__(self, node_id, locality):
        self.node_id = node_id
        self.locality = locality
        self.log = []

    def on_message(self, sim, msg, src):
        self.log.append((sim.clock, "msg", msg, src))

    def on_timer(self, sim, tag, payload):
        self.log.append((sim.clock, "timer", tag, payload))

    def on_crash(self, sim):
        self.log.append((sim.clock, "crash", None, None))

    def on_rejoin(self, sim):
        self.log.append((sim.clock, "rejoin", None, None))


def two_nodes(net_b="n1"):
    sim = Simulator(NetworkModel(5 * MS, 10 * MS))
    a = Recorder(NodeId("a"), loc())
    b = Recorder(NodeId("b"), loc(net=net_b))
    sim.add_node(a)
    sim.add_node(b)
    return sim, a, b


def test_latency_model():
    net = NetworkModel(5 * MS, 10 * MS)
    assert net.latency(loc(), loc()) == 5 * MS              # rank 4
    assert net.latency(loc(), loc(net="x")) == 15 * MS      # rank 3
    assert net.latency(loc(), loc(continent="na")) == 45 * MS  # rank 0


def test_delivery_order_and_clock():
    sim, a, b = two_nodes()
    sim.send(a.node_id, b.node_id, "first")
    sim.send(a.node_id, b.node_id, "second")  # same time: seq breaks the tie
    sim.set_timer(b.node_id, "late", 9 * MS)
    sim.run_until(20 * MS)
    assert [(t, k, d) for t, k, d, _ in b.log] == [
        (5 * MS, "msg", "first"),
        (5 * MS, "msg", "second"),
        (9 * MS, "timer", "late"),
    ]
    assert sim.clock == 20 * MS
    with pytest.raises(ValueError):
        sim.run_until(0)


def test_send_to_unregistered_node():
    sim, a, _ = two_nodes()
    with pytest.raises(UnknownNode):
        sim.send(a.node_id, NodeId("ghost"), "x")


def test_crash_drops_and_bounces():
    sim, a, b = two_nodes()
    sim.inject_crash(b.node_id, 1 * MS)
    sim.send(a.node_id, b.node_id, "hello")
    sim.run_until(60 * MS)
    assert b.log == [(1 * MS, "crash", None, None)]
    bounced = [m for _, k, m, _ in a.log if k == "msg"]
    assert len(bounced) == 1
    assert isinstance(bounced[0], SendFailed)
    assert bounced[0].original == "hello" and bounced[0].dead == b.node_id


def test_crashed_node_cannot_send_and_timers_freeze():
    sim, a, b = two_nodes()
    sim.inject_crash(a.node_id, 0)
    sim.set_timer(a.node_id, "tick", 2 * MS)
    sim.run_until(1 * MS)
    sim.send(a.node_id, b.node_id, "x")  # silently dropped
    sim.run_until(60 * MS)
    assert b.log == []
    assert all(k != "timer" for _, k, _, _ in a.log)


def test_rejoin_semantics():
    sim, a, _ = two_nodes()
    with pytest.raises(NotCrashed):
        sim.inject_rejoin(a.node_id, 0)
        sim.run_until(1)
    sim2, a2, _ = two_nodes()
    sim2.inject_crash(a2.node_id, 0)
    sim2.inject_rejoin(a2.node_id, 5 * MS)
    sim2.run_until(10 * MS)
    assert (5 * MS, "rejoin", None, None) in a2.log
    assert sim2.is_alive(a2.node_id)


def test_deliver_count_matches_trace():
    sim, a, b = two_nodes()
    sim.send(a.node_id, b.node_id, "x")
    sim.send(b.node_id, a.node_id, "y")
    sim.run_until(50 * MS)
    delivers = [r for r in sim.trace if r.kind == "deliver"]
    assert sim.deliver_count == len(delivers) == 2


def test_determinism_identical_traces():
    def run():
        sim, a, b = two_nodes(net_b="n9")
        for i in range(10):
            sim.send(a.node_id, b.node_id, f"m{i}")
            sim.set_timer(a.node_id, f"t{i}", i * MS)
        sim.inject_crash(b.node_id, 100 * MS)
        sim.run_until(200 * MS)
        return sim.trace_lines()

    assert run() == run()


# -- step accounting -----------------------------------------------------


def test_worked_example_measured_and_bound():
    # one cluster, 3 catalogue keys, 2 matches, largest store 8:
    # measured = 3 key scans + 2*2 id steps + 2*2 fetch + 2*ceil(log2 8)
    steps = StepCounter()
    rid = "q1"
    steps.on_lookup(rid, "c1", m_keys=3, key_steps=3, matches=2)
    steps.on_fetch_request(rid, "c1", NodeId("a1"), n_objects=2)
    steps.on_probe(rid, "c1", store_size=8, n_objects=2)
    acct = steps.account_search(rid)
    assert acct.measured == 17
    assert acct.decomposed == 17
    assert acct.bound == 33  # 1 * 3 * (4*2 + 3)
    assert acct.bound_applicable and acct.clusters == 1


def test_no_match_charges_key_scans_only():
    steps = StepCounter()
    steps.on_lookup("q", "c1", m_keys=4, key_steps=4, matches=0)
    steps.on_lookup("q", "c2", m_keys=2, key_steps=2, matches=0)
    acct = steps.account_search("q")
    assert acct.measured == acct.decomposed == 6
    assert not acct.bound_applicable


def test_unknown_request_raises():
    with pytest.raises(UnknownRequest):
        StepCounter().account_search("nope")


def test_message_counter():
    steps = StepCounter()
    assert steps.message_count("q") == 0
    steps.on_message("q")
    steps.on_message("q")
    assert steps.message_count("q") == 2


def test_formula_bound_multi_cluster_takes_maxima():
    assert formula_bound([]) == 0
    assert formula_bound([(3, 2, 8)]) == 33
    assert formula_bound([(3, 1, 2), (5, 2, 16)]) == 2 * 5 * (8 + 4)


def test_ideal_closed_form():
    import math
    for b in (64, 256, 1024):
        for n in (16, 64):
            expected = b * (4 + int(math.log2(2 * b // n)))
            assert ideal_search_steps(b, n) == expected
    assert ideal_search_steps(1024, 64) == 9216
    with pytest.raises(ValueError):
        ideal_search_steps(10, 4, clusters=3)
