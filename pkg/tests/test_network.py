"""Whole-fabric invariants on small randomized runs."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqbalance_sim.config import apply_overrides
from seqbalance_sim.network import SCHEMES
from seqbalance_sim.runner import _make_network, _schedule_arrivals, arrivals_for, run_one
from seqbalance_sim.switch import DATA

from conftest import small_config


def loaded(scheme, load=0.6, seed=1, horizon=3_000_000, stop=2_000_000, **kw):
    if isinstance(scheme, str):
        scheme = {"name": scheme}
    cfg = small_config(horizon_ns=horizon, scheme=scheme,
                       workload={"load": load, "stop_ns": stop, "cdf": "websearch",
                                 "size_scale": 0.1}, **kw)
    sim, net = _make_network(cfg, seed)
    _schedule_arrivals(sim, net, arrivals_for(cfg, seed, net.topology))
    return cfg, sim, net


def tap_deliveries(net):
    seen = []
    for sw in net.switches.values():
        orig = sw._deliver_local

        def wrapped(pkt, link, _orig=orig, _sw=sw):
            if pkt.kind is DATA and pkt.dst_tor == _sw.id and pkt.src_tor != _sw.id:
                seen.append((pkt.qp.qp_id, pkt.idx, pkt.path_tag))
            _orig(pkt, link)

        sw._deliver_local = wrapped
    return seen


def test_subflows_stay_on_one_path():
    cfg, sim, net = loaded("seqbalance", load=0.8)
    seen = tap_deliveries(net)
    sim.run_until(cfg["horizon_ns"])
    pins = {}
    for qp, idx, tag in net.pin_log:
        pins.setdefault(qp, []).append((idx, tag))
    assert seen and net.pin_log
    for qp, idx, tag in seen:
        owner = max(p for p in pins[qp] if p[0] <= idx)
        assert tag == owner[1]
    assert net.reorder_retx_packets == 0


def test_selection_avoids_inactive_paths():
    cfg, sim, net = loaded({"name": "seqbalance", "phi_ns": 200_000}, load=0.9)
    sim.run_until(cfg["horizon_ns"])
    tors = [net.switches[t] for t in net.topology.tors]
    assert sum(t.congestion_rx for t in tors) > 0
    assert sum(t.inactive_hits for t in tors) == 0


@settings(max_examples=6, deadline=None)
@given(st.integers(1, 10_000), st.sampled_from(["ecmp", "drill", "seqbalance"]))
def test_pfc_keeps_incast_lossless(seed, scheme):
    cfg = small_config(horizon_ns=2_000_000, scheme={"name": scheme},
                       topology={"fabric_link": {"gbps": 10, "delay_ns": 1000,
                                                 "queue_bytes": 200_000}},
                       workload={"load": 0.9, "pairing": "incast", "cdf": "websearch",
                                 "size_scale": 0.1})
    res = run_one(cfg, seed)
    assert res.counters["drops"] == 0


def test_drops_happen_without_pfc():
    cfg = small_config(horizon_ns=2_000_000, pfc={"enabled": False},
                       topology={"host_link": {"gbps": 10, "delay_ns": 1000,
                                               "queue_bytes": 20_000}},
                       dcqcn={"enabled": False},
                       workload={"load": 0.9, "pairing": "incast", "cdf": "websearch",
                                 "size_scale": 0.1})
    assert run_one(cfg, 1).counters["drops"] > 0


def test_one_cqe_per_wqe_after_last_ack():
    cfg, sim, net = loaded("seqbalance")
    cqes = []
    net.cqe_listeners.append(lambda msg, rec: cqes.append((msg, rec)))
    sim.run_until(cfg["horizon_ns"])
    ids = [rec.wqe_id for _, rec in cqes]
    assert len(ids) == len(set(ids)) > 0
    for msg, rec in cqes:
        assert msg.bitmap.completed
        assert rec.end >= msg.last_ack_time
        assert rec.end == msg.last_ack_time


@pytest.mark.parametrize("scheme", SCHEMES)
def test_bytes_conserved_when_everything_completes(scheme):
    cfg, sim, net = loaded(scheme, horizon=20_000_000, stop=1_000_000)
    sim.run_until(cfg["horizon_ns"])
    assert not net.messages
    sizes = {}
    for r in net.records:
        sizes[(r.src, r.dst)] = sizes.get((r.src, r.dst), 0) + r.size
    for qp in net.all_qps():
        assert qp.sent_bytes == qp.receiver.delivered_bytes + qp.retx_bytes
    delivered = {}
    for qp in net.all_qps():
        key = (qp.src_host, qp.dst_host)
        delivered[key] = delivered.get(key, 0) + qp.receiver.delivered_bytes
    assert delivered == sizes


def test_in_flight_accounting_at_horizon():
    cfg, sim, net = loaded("ecmp", load=0.9, horizon=1_000_000, stop=1_000_000)
    sim.run_until(cfg["horizon_ns"])
    for qp in net.all_qps():
        fresh = qp.sent_bytes - qp.retx_bytes
        assert fresh >= qp.receiver.delivered_bytes


def test_sampled_bytes_equal_fabric_bytes():
    cfg, sim, net = loaded("seqbalance", horizon=4_000_000, stop=1_000_000)
    net.start_imbalance_sampling(100_000, cfg["horizon_ns"])
    sim.run_until(cfg["horizon_ns"])
    for t in net.topology.tors:
        sampled = sum(sum(s.per_uplink_bytes) for s in net.imbalance if s.tor == t)
        assert sampled == sum(p.tx_bytes for p in net.switches[t].uplinks)


def test_dedup_only_removes_congestion_packets():
    def overhead(dedup):
        cfg, sim, net = loaded({"name": "seqbalance", "dedup_ns": dedup}, load=0.9)
        sim.run_until(cfg["horizon_ns"])
        return net.congestion_bytes

    assert overhead(None) <= overhead(0)


def test_no_marks_means_no_congestion_packets():
    cfg = small_config(horizon_ns=2_000_000, scheme={"name": "seqbalance"},
                       ecn={"enabled": False},
                       workload={"load": 0.5, "cdf": "websearch", "size_scale": 0.1})
    res = run_one(cfg, 2)
    assert res.counters["congestion_bytes"] == 0
    assert res.summary()["congestion_bps"] == 0


def test_dcqcn_recovers_line_rate_within_10ms():
    cfg = small_config(horizon_ns=30_000_000)
    sim, net = _make_network(cfg, 1)
    hosts = net.topology.hosts
    net.submit(hosts[0], hosts[2], 200_000_000)
    sim.run_until(10_000)
    net.submit(hosts[1], hosts[2], 2_000_000)  # short competitor on the same receiver
    done = []
    net.cqe_listeners.append(lambda msg, rec: done.append(rec))
    while not done:
        sim.run_until(sim.now + 100_000)
    (qp,) = net.hosts[hosts[0]].qps[hosts[2]]
    assert qp.dcqcn.current_rate < qp.dcqcn.line_rate
    sim.run_until(done[0].end + 10_000_000)
    assert qp.dcqcn.current_rate == qp.dcqcn.line_rate
    assert qp.dcqcn.current_rate <= qp.dcqcn.line_rate


@pytest.mark.parametrize("scheme", SCHEMES)
def test_schemes_share_transport(scheme):
    res = run_one(small_config(horizon_ns=2_000_000, scheme={"name": scheme},
                               workload={"load": 0.5, "cdf": "websearch",
                                         "size_scale": 0.1, "stop_ns": 1_000_000}), 3)
    assert res.records and res.counters["drops"] == 0
    assert all(s >= 1 for s in res.slowdowns)
    if scheme == "seqbalance":
        assert res.counters["reorder_retx_packets"] == 0


def test_determinism_of_full_runs():
    a = run_one(small_config(scheme={"name": "drill"}, workload={"load": 0.7}), 5)
    b = run_one(small_config(scheme={"name": "drill"}, workload={"load": 0.7}), 5)
    assert a.summary() == b.summary()
    assert a.records == b.records
    assert a.stats == b.stats
