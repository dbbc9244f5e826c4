"""Per-flow records, FCT slowdown, throughput imbalance and CSV emitters."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .engine import InvariantViolation

FLOW_COLUMNS = ("seed", "wqe_id", "src", "dst", "size_bytes", "start_ns", "end_ns",
                "fct_ns", "ideal_ns", "slowdown", "retx_bytes", "scheme", "n")
IMBALANCE_COLUMNS = ("seed", "scheme", "tor", "window_start_ns", "imbalance",
                     "per_uplink_bytes")


@dataclass
class FlowRecord:
    wqe_id: int
    src: int
    dst: int
    size: int
    start: int
    end: int
    retransmitted_bytes: int
    scheme: str
    n: int = 1

    @property
    def fct(self) -> int:
        return self.end - self.start


@dataclass
class ImbalanceSample:
    tor: int
    window_start: int
    per_uplink_bytes: list[int]


def ideal_fct(size: int, line_rate: float, base_rtt: int) -> float:
    return size * 8e9 / line_rate + base_rtt


def fct_slowdown(record: FlowRecord, line_rate: float, base_rtt: int) -> float:
    s = record.fct / ideal_fct(record.size, line_rate, base_rtt)
    if s < 1 - 1e-9:
        raise InvariantViolation(
            f"flow {record.wqe_id}: slowdown {s:.6f} < 1 (fct {record.fct} ns)")
    return s


def throughput_imbalance(sample: ImbalanceSample | list[int]) -> float | None:
    """(max - min) / mean over per-uplink bytes; None for an all-zero window."""
    b = sample.per_uplink_bytes if isinstance(sample, ImbalanceSample) else sample
    if not b:
        raise ValueError("no uplinks in sample")
    total = sum(b)
    if total == 0:
        return None
    return (max(b) - min(b)) * len(b) / total


def percentile(values, p: float):
    """Nearest-rank percentile."""
    if len(values) == 0:
        raise ValueError("percentile of an empty list")
    if not 0 <= p <= 100:
        raise ValueError("p must be in [0, 100]")
    s = sorted(values)
    rank = max(1, math.ceil(p / 100 * len(s)))
    return s[rank - 1]


def mean(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("mean of an empty list")
    return math.fsum(values) / len(values)


def congestion_packet_overhead(data_bytes: int, congestion_bytes: int,
                               horizon_ns: int) -> tuple[float, float]:
    """(data_bps, congestion_bps) averaged over the horizon."""
    if horizon_ns <= 0:
        raise ValueError("horizon must be positive")
    return data_bytes * 8e9 / horizon_ns, congestion_bytes * 8e9 / horizon_ns


def summarize_slowdowns(slowdowns: list[float]) -> dict:
    return {
        "flows": len(slowdowns),
        "mean_slowdown": mean(slowdowns) if slowdowns else float("nan"),
        "p99_slowdown": percentile(slowdowns, 99) if slowdowns else float("nan"),
    }


# -- CSV -------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, float):
        return repr(round(v, 9))
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return v


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if isinstance(row, dict):
                row = [row.get(c, "") for c in columns]
            w.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def record_dict(rec: FlowRecord) -> dict:
    return {f.name: getattr(rec, f.name) for f in fields(rec)}


__all__ = [
    "FLOW_COLUMNS", "IMBALANCE_COLUMNS", "FlowRecord", "ImbalanceSample",
    "congestion_packet_overhead", "fct_slowdown", "ideal_fct", "mean", "percentile",
    "read_csv", "record_dict", "summarize_slowdowns", "throughput_imbalance",
    "write_csv",
]
