import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from seqbalance_sim.engine import InvariantViolation
from seqbalance_sim.metrics import (FlowRecord, ImbalanceSample,
                                    congestion_packet_overhead, fct_slowdown, ideal_fct,
                                    percentile, read_csv, throughput_imbalance, write_csv)


def rec(size, fct):
    return FlowRecord(1, 0, 1, size, 1000, 1000 + fct, 0, "ecmp")


def test_flow_at_ideal_time_has_slowdown_one():
    ideal = int(ideal_fct(125_000, 10e9, 2000))
    assert fct_slowdown(rec(125_000, ideal), 10e9, 2000) == 1.0


def test_slowdown_example():
    s = fct_slowdown(rec(1_000_000, 164_000), 100e9, 4000)
    assert s == pytest.approx(164 / 84)
    assert s == pytest.approx(1.95, abs=0.01)


def test_slowdown_below_one_aborts():
    with pytest.raises(InvariantViolation):
        fct_slowdown(rec(1_000_000, 50_000), 100e9, 4000)


def test_imbalance_examples():
    assert throughput_imbalance([7, 7, 7]) == 0
    assert throughput_imbalance(ImbalanceSample(1, 0, [10, 20, 30])) == pytest.approx(1.0)
    for n in (2, 4, 8):
        assert throughput_imbalance([1000] + [0] * (n - 1)) == pytest.approx(n)
    assert throughput_imbalance([0, 0, 0]) is None
    with pytest.raises(ValueError):
        throughput_imbalance([])


@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=16))
def test_imbalance_nonnegative_and_zero_iff_equal(b):
    v = throughput_imbalance(b)
    if sum(b) == 0:
        assert v is None
    else:
        assert v >= 0
        assert (v == 0) == (len(set(b)) == 1)


def test_percentile_examples():
    vals = list(range(1, 101))
    assert percentile(vals, 100) == 100
    assert percentile(vals, 99) == 99
    assert percentile([5], 0) == 5
    with pytest.raises(ValueError):
        percentile([], 50)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=60), st.integers(0, 100))
def test_percentile_matches_sort_oracle(vals, p):
    # smallest value such that at least p% of the sample is <= it
    s = sorted(vals)
    want = next(v for v in s if sum(x <= v for x in s) * 100 >= p * len(s))
    assert percentile(vals, p) == want


def test_overhead_arithmetic():
    assert congestion_packet_overhead(10**6, 0, 10**6) == (8e9, 0.0)
    data, cong = congestion_packet_overhead(125_000_000, 64, 10**9)
    assert data == pytest.approx(1e9) and cong == pytest.approx(512)


def test_csv_round_trip(tmp_path):
    p = tmp_path / "x.csv"
    write_csv(p, ("a", "b", "c"), [(1, 0.5, [1, 2]), {"a": 2, "c": "z"}])
    rows = read_csv(p)
    assert rows == [{"a": "1", "b": "0.5", "c": "1 2"}, {"a": "2", "b": "", "c": "z"}]
    assert math.isclose(float(rows[0]["b"]), 0.5)
