"""Flow-size CDFs, Poisson arrivals, and trace-level micro-scenarios."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .engine import SeededRng, Stream
from .topology import ConfigError, Topology

PAIRINGS = ("random", "permutation", "incast")
BUILTIN_CDFS = ("websearch", "alicloud-storage-like")


@dataclass(frozen=True)
class FlowSizeCdf:
    points: tuple[tuple[float, float], ...]  # (size_bytes, cumulative probability)
    name: str = ""

    def __post_init__(self):
        pts = self.points
        if not pts:
            raise ConfigError("CDF needs at least one point")
        for (s0, p0), (s1, p1) in zip(pts, pts[1:]):
            if not s1 > s0:
                raise ConfigError("CDF sizes must be strictly increasing")
            if not p1 > p0:
                raise ConfigError("CDF probabilities must be strictly increasing")
        if pts[0][1] < 0 or pts[0][0] < 0:
            raise ConfigError("CDF values must be non-negative")
        if abs(pts[-1][1] - 1.0) > 1e-9:
            raise ConfigError("CDF must end at probability 1.0")

    def quantile(self, u: float) -> float:
        pts = self.points
        if u <= pts[0][1]:
            return pts[0][0]
        probs = [p for _, p in pts]
        i = bisect.bisect_left(probs, u)
        if i >= len(pts):
            return pts[-1][0]
        (s0, p0), (s1, p1) = pts[i - 1], pts[i]
        return s0 + (s1 - s0) * (u - p0) / (p1 - p0)

    @property
    def mean(self) -> float:
        """Mean of the piecewise-linear distribution (trapezoid rule)."""
        pts = self.points
        m = pts[0][0] * pts[0][1]
        for (s0, p0), (s1, p1) in zip(pts, pts[1:]):
            m += (p1 - p0) * (s0 + s1) / 2
        return m

    def scaled(self, factor: float) -> "FlowSizeCdf":
        return FlowSizeCdf(tuple((s * factor, p) for s, p in self.points),
                           f"{self.name}x{factor:g}")


def parse_cdf(text: str, name: str = "") -> FlowSizeCdf:
    pts = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{name or 'cdf'}:{lineno}: expected 'size probability'")
        try:
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise ConfigError(f"{name or 'cdf'}:{lineno}: not a number") from None
    return FlowSizeCdf(tuple(pts), name)


def load_cdf(source: str | Path) -> FlowSizeCdf:
    """Load a CDF file, or one of the shipped distributions by name."""
    if str(source) in BUILTIN_CDFS:
        text = resources.files("seqbalance_sim.data").joinpath(
            f"{source}.cdf").read_text()
        return parse_cdf(text, str(source))
    try:
        text = Path(source).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read CDF file {source}: {e}") from None
    return parse_cdf(text, Path(source).stem)


def sample_flow_size(cdf: FlowSizeCdf, rng) -> int:
    return max(1, int(round(cdf.quantile(rng.random()))))


@dataclass(frozen=True)
class TrafficSpec:
    load_fraction: float
    cdf: FlowSizeCdf
    seed: int = 0
    pairing: str = "random"

    def __post_init__(self):
        if not 0 < self.load_fraction <= 1:
            raise ConfigError("load_fraction must be in (0, 1]")
        if self.pairing not in PAIRINGS:
            raise ConfigError(f"unknown pairing {self.pairing!r}")


@dataclass(frozen=True)
class FlowArrival:
    time: int
    src: int
    dst: int
    size: int

    def __post_init__(self):
        if self.src == self.dst:
            raise ValueError("flow source equals destination")


def arrival_rate(spec: TrafficSpec, num_hosts: int, host_capacity: float) -> float:
    """Flows per second so that offered bytes equal load * aggregate host capacity."""
    return spec.load_fraction * num_hosts * host_capacity / (8 * spec.cdf.mean)


def derangement(hosts: list[int], rng, topology: Topology | None = None) -> dict[int, int]:
    """Random permutation without fixed points; cross-rack when a topology is given."""
    for _ in range(1000):
        perm = hosts[:]
        rng.shuffle(perm)
        if all(a != b for a, b in zip(hosts, perm)) and (
                topology is None or all(topology.host_tor[a] != topology.host_tor[b]
                                        for a, b in zip(hosts, perm))):
            return dict(zip(hosts, perm))
    raise ConfigError("could not draw a cross-rack permutation for these hosts")


def poisson_arrivals(spec: TrafficSpec, topology: Topology, horizon: int,
                     start: int = 0) -> list[FlowArrival]:
    hosts = topology.hosts
    if len(hosts) < 2:
        raise ConfigError("traffic needs at least two hosts")
    rng = SeededRng(spec.seed, Stream.WORKLOAD)
    cap = topology.host_link(hosts[0]).capacity
    lam = arrival_rate(spec, len(hosts), cap)
    mean_gap_ns = 1e9 / lam
    cross = len(topology.tors) > 1
    perm = derangement(hosts, rng, topology if cross else None) \
        if spec.pairing == "permutation" else None
    sink = hosts[rng.randrange(len(hosts))] if spec.pairing == "incast" else None
    out = []
    t = float(start)
    while True:
        t += rng.expovariate(1.0) * mean_gap_ns
        if t > horizon:
            break
        if perm is not None:
            src = hosts[rng.randrange(len(hosts))]
            dst = perm[src]
        elif sink is not None:
            src = sink
            while src == sink:
                src = hosts[rng.randrange(len(hosts))]
            dst = sink
        else:
            src = hosts[rng.randrange(len(hosts))]
            dst = src
            while dst == src:
                dst = hosts[rng.randrange(len(hosts))]
        out.append(FlowArrival(int(t), src, dst, sample_flow_size(spec.cdf, rng)))
    return out


def permutation_elephants(topology: Topology, size: int, seed: int,
                          start: int = 0) -> list[FlowArrival]:
    """One large flow per host along a random cross-rack permutation."""
    rng = SeededRng(seed, Stream.WORKLOAD)
    hosts = topology.hosts
    perm = derangement(hosts, rng, topology if len(topology.tors) > 1 else None)
    return [FlowArrival(start, h, perm[h], size) for h in hosts]


@dataclass(frozen=True)
class DelayedPacketScenario:
    message_size: int
    delayed_index: int
    extra_delay: int

    def __post_init__(self):
        if self.message_size < 1 or self.delayed_index < 0 or self.extra_delay < 0:
            raise ConfigError("invalid delayed-packet scenario")


def delayed_packet_scenario(message_size: int, delayed_psn: int | None,
                            extra_delay: int, mtu: int = 1024) -> DelayedPacketScenario:
    """Describe a one-packet hold; ``None`` picks the middle packet."""
    packets = -(-message_size // mtu)
    idx = packets // 2 if delayed_psn is None else delayed_psn
    if not 0 <= idx < packets:
        raise ConfigError(f"delayed packet {idx} outside message of {packets} packets")
    return DelayedPacketScenario(message_size, idx, extra_delay)


def flowlet_census(trace: list[tuple[int, int]],
                   gap_thresholds: list[int]) -> dict[int, list[int]]:
    """Split a (departure_ns, bytes) trace at gaps above each threshold.

    Returns flowlet byte sizes per threshold. A gap equal to the threshold
    does not split, so threshold 0 still merges packets sent back to back
    at the same instant.
    """
    out: dict[int, list[int]] = {}
    for thr in gap_thresholds:
        if thr < 0:
            raise ValueError("gap threshold must be >= 0")
        sizes = []
        cur = 0
        last = None
        for t, b in trace:
            if last is not None and t - last > thr:
                sizes.append(cur)
                cur = 0
            cur += b
            last = t
        if last is not None:
            sizes.append(cur)
        out[thr] = sizes
    return out


def offered_load(arrivals: list[FlowArrival], num_hosts: int, host_capacity: float,
                 horizon: int) -> float:
    total = math.fsum(a.size for a in arrivals)
    return total * 8e9 / (num_hosts * host_capacity * horizon)
