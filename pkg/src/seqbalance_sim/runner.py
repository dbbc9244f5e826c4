"""Executes configured experiments and writes CSV / gnuplot outputs."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .config import (build_topology, dump_config, ecn_config, pfc_config,
                     scheme_params, sweep_variants, transport_params)
from .engine import EventKind, InvariantViolation, RunStats, Simulator, Stream
from .metrics import (FLOW_COLUMNS, IMBALANCE_COLUMNS, FlowRecord, fct_slowdown,
                      ideal_fct, mean, percentile, throughput_imbalance, write_csv)
from .network import Network
from .topology import Topology
from .workload import (FlowSizeCdf, TrafficSpec, delayed_packet_scenario,
                       flowlet_census, load_cdf, permutation_elephants, poisson_arrivals)

OUTPUT_ENV = "SEQBALANCE_OUT"

SUMMARY_COLUMNS = (
    "variant", "seed", "scheme", "n", "load", "flows", "open_flows", "mean_slowdown",
    "p99_slowdown", "mean_imbalance", "imbalance_samples", "drops",
    "reorder_retx_packets", "timeout_retx_packets", "ecn_marks", "pause_frames",
    "congestion_packets", "congestion_bytes", "data_bytes", "data_bps",
    "congestion_bps", "overhead_ratio", "all_senders_gbps", "fallbacks", "events")
TABLE1_COLUMNS = ("size_bytes", "delayed_index", "extra_delay_ns", "fct_base_ns",
                  "fct_delayed_ns", "ratio", "reorder_retx_packets")
FLOWLET_COLUMNS = ("threshold_ns", "flowlets", "min_bytes", "max_bytes", "flow_bytes")
THROUGHPUT_COLUMNS = ("variant", "seed", "phase", "senders", "start_ns", "end_ns",
                      "gbps")


@dataclass
class RunResult:
    variant: str
    seed: int
    scheme: str
    n: int
    load: float | None
    records: list[FlowRecord] = field(default_factory=list)
    slowdowns: list[float] = field(default_factory=list)
    ideal: list[float] = field(default_factory=list)
    imbalance_rows: list[tuple] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    stats: RunStats | None = None
    horizon: int = 0
    throughput: list[tuple] = field(default_factory=list)
    table1: list[tuple] = field(default_factory=list)
    flowlets: dict = field(default_factory=dict)
    flow_bytes: int = 0

    @property
    def imbalances(self) -> list[float]:
        return [r[4] for r in self.imbalance_rows]

    def summary(self) -> dict:
        c = self.counters
        row = {"variant": self.variant, "seed": self.seed, "scheme": self.scheme,
               "n": self.n, "load": "" if self.load is None else self.load,
               "flows": len(self.slowdowns), "open_flows": c.get("open_flows", 0),
               "events": self.stats.total if self.stats else 0}
        if self.slowdowns:
            row["mean_slowdown"] = mean(self.slowdowns)
            row["p99_slowdown"] = percentile(self.slowdowns, 99)
        if self.imbalance_rows:
            row["mean_imbalance"] = mean(self.imbalances)
        row["imbalance_samples"] = len(self.imbalance_rows)
        for k in ("drops", "reorder_retx_packets", "timeout_retx_packets", "ecn_marks",
                  "pause_frames", "congestion_packets", "congestion_bytes",
                  "data_bytes", "fallbacks"):
            row[k] = c.get(k, 0)
        if self.horizon:
            data_bps = c.get("data_bytes", 0) * 8e9 / self.horizon
            cong_bps = c.get("congestion_bytes", 0) * 8e9 / self.horizon
            row["data_bps"] = data_bps
            row["congestion_bps"] = cong_bps
            row["overhead_ratio"] = cong_bps / data_bps if data_bps else 0.0
        if self.throughput:
            row["all_senders_gbps"] = self.throughput[-1][-1]
        return row


# -- single runs ------------------------------------------------------------------

def _make_network(cfg: dict, seed: int, topo: Topology | None = None):
    topo = topo or build_topology(cfg)
    sim = Simulator(seed)
    net = Network(sim, topo, scheme_params(cfg), transport_params(cfg), ecn_config(cfg),
                  pfc_config(cfg))
    return sim, net


def _flow_cdf(w: dict) -> FlowSizeCdf:
    if w["fixed_size"] is not None:
        cdf = FlowSizeCdf(((float(w["fixed_size"]), 1.0),), "fixed")
    else:
        cdf = load_cdf(w["cdf"])
    if w["size_scale"] != 1:
        cdf = cdf.scaled(w["size_scale"])
    return cdf


def arrivals_for(cfg: dict, seed: int, topo: Topology | None = None):
    """The flow arrival list of a poisson/elephants config (scheme independent)."""
    topo = topo or build_topology(cfg)
    w = cfg["workload"]
    if w["kind"] == "elephants":
        return permutation_elephants(topo, int(w["size"]), seed, int(w["start_ns"]))
    stop = w["stop_ns"] if w["stop_ns"] is not None else cfg["horizon_ns"]
    spec = TrafficSpec(float(w["load"]), _flow_cdf(w), seed, w["pairing"])
    return poisson_arrivals(spec, topo, int(stop), int(w["start_ns"]))


def _schedule_arrivals(sim: Simulator, net: Network, arrivals) -> None:
    it = iter(arrivals)

    def fire(a):
        net.submit(a.src, a.dst, a.size)
        nxt = next(it, None)
        if nxt is not None:
            sim.call_at(nxt.time, EventKind.FLOW_ARRIVAL, fire, nxt)

    first = next(it, None)
    if first is not None:
        sim.call_at(first.time, EventKind.FLOW_ARRIVAL, fire, first)


def _check(cfg: dict, net: Network, stats: RunStats) -> None:
    if stats.scheduled != stats.total + stats.queued:
        raise InvariantViolation(
            f"event conservation: scheduled {stats.scheduled} != processed "
            f"{stats.total} + queued {stats.queued}")
    if cfg["pfc"]["enabled"] and net.drops:
        raise InvariantViolation(f"{net.drops} packets dropped with PFC enabled")
    for r in net.records:
        if r.end < r.start:
            raise InvariantViolation(f"flow {r.wqe_id} ends before it starts")


def _finish(cfg, variant, seed, net: Network, stats: RunStats) -> RunResult:
    _check(cfg, net, stats)
    sp = net.scheme
    w = cfg["workload"]
    res = RunResult(variant, seed, sp.name, sp.n,
                    float(w["load"]) if w["kind"] == "poisson" else None,
                    counters=net.counters(), stats=stats, horizon=cfg["horizon_ns"])
    topo = net.topology
    warm = cfg["metrics"]["warmup_ns"]
    fixed_rtt = cfg["metrics"]["base_rtt_ns"]
    for r in sorted(net.records, key=lambda r: r.wqe_id):
        if r.start < warm:
            continue
        rate = topo.host_link(r.src).capacity
        rtt = fixed_rtt if fixed_rtt is not None else topo.unloaded_rtt(r.src, r.dst)
        res.records.append(r)
        res.ideal.append(ideal_fct(r.size, rate, rtt))
        res.slowdowns.append(fct_slowdown(r, rate, rtt))
    for s in net.imbalance:
        if s.window_start < warm:
            continue
        v = throughput_imbalance(s)
        if v is not None:
            res.imbalance_rows.append((seed, sp.name, s.tor, s.window_start, v,
                                       s.per_uplink_bytes))
    return res


def run_traffic(cfg: dict, seed: int, variant: str = "base") -> RunResult:
    topo = build_topology(cfg)
    sim, net = _make_network(cfg, seed, topo)
    horizon = cfg["horizon_ns"]
    _schedule_arrivals(sim, net, arrivals_for(cfg, seed, topo))
    net.start_imbalance_sampling(cfg["metrics"]["imbalance_window_ns"], horizon)
    stats = sim.run_until(horizon)
    return _finish(cfg, variant, seed, net, stats)


def closed_loop_load(topo, pairs) -> float:
    """Sender line rate as a fraction of the first sender's ToR uplink capacity."""
    tor = topo.host_tor[pairs[0][0]]
    up = sum(topo.link(tor, v).capacity for v in topo.up_neighbors(tor))
    return round(sum(topo.host_link(s).capacity for s, _ in pairs) / up, 6)


def run_closed_loop(cfg: dict, seed: int, variant: str = "base") -> RunResult:
    topo = build_topology(cfg)
    sim, net = _make_network(cfg, seed, topo)
    w = cfg["workload"]
    hosts = topo.hosts
    horizon = cfg["horizon_ns"]
    pairs = [(hosts[a], hosts[b]) for a, b in w["pairs"]][:w["active_pairs"]]
    size, depth, phase = int(w["size"]), int(w["depth"]), int(w["phase_ns"])
    # the Simulator seed also drives an optional start jitter for the pairs
    jitter = sim.rng(Stream.SCENARIO)

    def start(i):
        for _ in range(depth):
            net.submit(*pairs[i], size, tag=i)

    def on_cqe(msg, rec):
        if msg.tag is not None and sim.now < horizon:
            net.submit(*pairs[msg.tag], size, tag=msg.tag)

    net.cqe_listeners.append(on_cqe)
    for i in range(len(pairs)):
        sim.call_at(i * phase + jitter.randrange(1000), EventKind.FLOW_ARRIVAL, start, i)
    warm = int(cfg["metrics"]["warmup_ns"])
    marks = []
    for i in range(len(pairs)):
        lo = i * phase + warm
        hi = (i + 1) * phase if i + 1 < len(pairs) else horizon
        if lo < hi:
            marks.append((i + 1, lo, hi))
    snaps = {}

    def snap(t):
        snaps[t] = net.delivered_bytes

    for t in sorted({m[1] for m in marks} | {m[2] for m in marks}):
        sim.call_at(t, EventKind.METRIC_SAMPLE, snap, t)
    net.start_imbalance_sampling(cfg["metrics"]["imbalance_window_ns"], horizon)
    stats = sim.run_until(horizon)
    res = _finish(cfg, variant, seed, net, stats)
    res.load = closed_loop_load(topo, pairs)
    for k, lo, hi in marks:
        gbps = (snaps[hi] - snaps[lo]) * 8 / (hi - lo)
        res.throughput.append((variant, seed, k, k, lo, hi, gbps))
    return res


def run_delayed_packet(cfg: dict, seed: int, variant: str = "base") -> RunResult:
    w = cfg["workload"]
    topo = build_topology(cfg)
    src, dst = topo.hosts[0], topo.hosts[-1]
    mtu = cfg["transport"]["mtu"]
    res = None
    rows = []
    for size in w["sizes"]:
        scen = delayed_packet_scenario(int(size), w["delayed_index"],
                                       int(w["extra_delay_ns"]), mtu)
        fct = []
        for hold in (False, True):
            sim, net = _make_network(cfg, seed, topo)
            wqe = net.submit(src, dst, scen.message_size)
            if hold:
                qp = net.hosts[src].qps[dst][0]
                net.hold = (qp.qp_id, scen.delayed_index, scen.extra_delay)
            stats = sim.run_until(cfg["horizon_ns"])
            if hold and not net.hold_applied:
                raise InvariantViolation("delayed packet was never transmitted")
            if len(net.records) != 1:
                raise InvariantViolation(f"message of {size} B did not complete")
            fct.append(net.records[0].fct)
            r = _finish(cfg, variant, seed, net, stats)
            if res is None:
                res = r
            else:
                res.records += r.records
                res.slowdowns += r.slowdowns
        del wqe
        rows.append((size, scen.delayed_index, scen.extra_delay, fct[0], fct[1],
                     fct[1] / fct[0], r.counters["reorder_retx_packets"]))
    res.table1 = rows
    return res


def run_flowlet_census(cfg: dict, seed: int, variant: str = "base") -> RunResult:
    w = cfg["workload"]
    topo = build_topology(cfg)
    sim, net = _make_network(cfg, seed, topo)
    hosts = topo.hosts
    src, dst = hosts[0], hosts[-1]
    net.trace = []
    net.submit(src, dst, int(w["flow_size"]))
    net.trace_qps = {q.qp_id for q in net.hosts[src].qps[dst]}
    bg_load = float(w["background_load"])
    if bg_load > 0 and len(hosts) > 2:
        rng = sim.rng(Stream.WORKLOAD)
        rate = topo.host_link(hosts[1]).capacity
        size = int(w["background_size"])
        mean_gap = size * 8e9 / (rate * bg_load)
        t = 0.0
        arrivals = []
        while True:
            t += rng.expovariate(1.0) * mean_gap
            if t >= cfg["horizon_ns"]:
                break
            arrivals.append(int(t))

        def bg(_):
            net.submit(hosts[1], dst, size)

        for t_ns in arrivals:
            sim.call_at(t_ns, EventKind.FLOW_ARRIVAL, bg, None)
    stats = sim.run_until(cfg["horizon_ns"])
    res = _finish(cfg, variant, seed, net, stats)
    if not any(r.src == src for r in net.records):
        raise InvariantViolation("census flow did not finish within the horizon")
    res.flowlets = flowlet_census(net.trace, list(w["thresholds_ns"]))
    res.flow_bytes = sum(b for _, b in net.trace)
    return res


RUNNERS = {
    "poisson": run_traffic,
    "elephants": run_traffic,
    "closed_loop": run_closed_loop,
    "delayed_packet": run_delayed_packet,
    "flowlet_census": run_flowlet_census,
}


def run_one(cfg: dict, seed: int, variant: str = "base") -> RunResult:
    return RUNNERS[cfg["workload"]["kind"]](cfg, seed, variant)


def _run_job(job):
    cfg, seed, variant = job
    return run_one(cfg, seed, variant)


def run_config(cfg: dict, jobs: int | None = None) -> list[RunResult]:
    """One run per (sweep variant, seed); results in deterministic order."""
    work = [(c, seed, label) for label, c in sweep_variants(cfg) for seed in c["seeds"]]
    jobs = jobs or cfg.get("jobs", 1)
    if jobs <= 1 or len(work) == 1:
        return [_run_job(j) for j in work]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_run_job, work))


# -- outputs ---------------------------------------------------------------------------

def output_dir(cfg: dict, override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    if cfg["output"]["dir"]:
        return Path(cfg["output"]["dir"])
    root = os.environ.get(OUTPUT_ENV, "results")
    return Path(root) / cfg["name"]


def _pooled(results: list[RunResult]) -> dict[str, dict]:
    out: dict[str, dict] = {}
    for r in results:
        agg = out.setdefault(r.variant, {"runs": [], "slowdowns": [], "imb": []})
        agg["runs"].append(r)
        agg["slowdowns"] += r.slowdowns
        agg["imb"] += r.imbalances
    return out


def aggregate_rows(results: list[RunResult]) -> list[dict]:
    rows = []
    for variant, agg in _pooled(results).items():
        runs = agg["runs"]
        first = runs[0]
        row = {"variant": variant, "seed": "all", "scheme": first.scheme, "n": first.n,
               "load": "" if first.load is None else first.load,
               "flows": len(agg["slowdowns"]),
               "imbalance_samples": len(agg["imb"])}
        if agg["slowdowns"]:
            row["mean_slowdown"] = mean(agg["slowdowns"])
            row["p99_slowdown"] = percentile(agg["slowdowns"], 99)
        if agg["imb"]:
            row["mean_imbalance"] = mean(agg["imb"])
        per_run = [r.summary() for r in runs]
        for k in ("open_flows", "drops", "reorder_retx_packets", "timeout_retx_packets",
                  "ecn_marks", "pause_frames", "congestion_packets", "congestion_bytes",
                  "data_bytes", "fallbacks", "events"):
            row[k] = sum(p.get(k, 0) for p in per_run)
        for k in ("data_bps", "congestion_bps", "all_senders_gbps"):
            vals = [p[k] for p in per_run if k in p]
            if vals:
                row[k] = mean(vals)
        if row.get("data_bps"):
            row["overhead_ratio"] = row["congestion_bps"] / row["data_bps"]
        rows.append(row)
    return rows


def _dat(path: Path, header: str, rows) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {header}\n")
        for row in rows:
            fh.write(" ".join(str(round(v, 9)) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


META = {
    "time_unit": "ns",
    "size_unit": "bytes",
    "slowdown": "per-flow fct / (size*8/host_line_rate + base_rtt); base_rtt is the "
                "unloaded propagation round trip of the host pair unless "
                "metrics.base_rtt_ns is set",
    "summary_aggregation": "seed=all rows pool flows of all seeds of a variant; "
                           "scheme comparisons use ratios of these pooled means",
    "percentile": "nearest rank",
    "imbalance": "(max-min)/mean of per-uplink transmitted bytes per ToR window; "
                 "all-zero windows skipped",
}


def write_outputs(cfg: dict, results: list[RunResult], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(dump_config(cfg))
    (out / "meta.yaml").write_text(yaml.safe_dump(META, sort_keys=False))
    flows = []
    for r in results:
        for rec, ideal, s in zip(r.records, r.ideal, r.slowdowns):
            flows.append((r.seed, rec.wqe_id, rec.src, rec.dst, rec.size, rec.start,
                          rec.end, rec.fct, ideal, s, rec.retransmitted_bytes,
                          rec.scheme, rec.n, r.variant))
    write_csv(out / "flows.csv", FLOW_COLUMNS + ("variant",), flows)
    imb = [row[:4] + (row[4], row[5], r.variant) for r in results
           for row in r.imbalance_rows]
    write_csv(out / "imbalance.csv", IMBALANCE_COLUMNS + ("variant",), imb)
    summary = [r.summary() for r in results] + aggregate_rows(results)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)

    plot = out / "plot"
    plot.mkdir(exist_ok=True)
    for variant, agg in _pooled(results).items():
        name = _safe(variant)
        if agg["slowdowns"]:
            s = sorted(agg["slowdowns"])
            _dat(plot / f"{name}_slowdown_cdf.dat", "slowdown cumulative_fraction",
                 [(v, (i + 1) / len(s)) for i, v in enumerate(s)])
        if agg["imb"]:
            s = sorted(agg["imb"])
            _dat(plot / f"{name}_imbalance_cdf.dat", "imbalance cumulative_fraction",
                 [(v, (i + 1) / len(s)) for i, v in enumerate(s)])
    agg_rows = aggregate_rows(results)
    _dat(plot / "summary.dat", "variant mean_slowdown p99_slowdown mean_imbalance",
         [(_safe(r["variant"]), r.get("mean_slowdown", "nan"),
           r.get("p99_slowdown", "nan"), r.get("mean_imbalance", "nan"))
          for r in agg_rows])

    tput = [row for r in results for row in r.throughput]
    if tput:
        write_csv(out / "throughput.csv", THROUGHPUT_COLUMNS, tput)
        _dat(plot / "throughput.dat", "phase senders gbps variant seed",
             [(t[2], t[3], t[6], _safe(t[0]), t[1]) for t in tput])
    t1 = [row for r in results for row in r.table1]
    if t1:
        write_csv(out / "table1.csv", TABLE1_COLUMNS, t1)
        _dat(plot / "table1.dat", "size_bytes ratio", [(t[0], t[5]) for t in t1])
    census = [r for r in results if r.flowlets]
    if census:
        rows = []
        for r in census:
            for thr, sizes in r.flowlets.items():
                rows.append((thr, len(sizes), min(sizes), max(sizes), r.flow_bytes))
        write_csv(out / "flowlets.csv", FLOWLET_COLUMNS, rows)
        _dat(plot / "flowlets.dat", "threshold_ns flowlets min_bytes max_bytes",
             [r[:4] for r in rows])


def run_experiment(cfg: dict, out: str | Path | None = None,
                   jobs: int | None = None) -> tuple[list[RunResult], Path]:
    results = run_config(cfg, jobs)
    path = output_dir(cfg, out)
    write_outputs(cfg, results, path)
    return results, path
