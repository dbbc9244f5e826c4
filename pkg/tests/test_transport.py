import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqbalance_sim.engine import SimulationError
from seqbalance_sim.switch import ACK, NAK
from seqbalance_sim.transport import (PSN_MOD, AckBitmap, GbnReceiver, QueuePair,
                                      WorkQueueElement, on_receive_ack_nak,
                                      on_receive_data, on_subwqe_complete, psn_add,
                                      psn_diff, shaper_split)

KB = 1024


def wqe(size, wid=1):
    return WorkQueueElement(wid, size, 0, 1, 0)


def make_qp(qp_id=1, rate=10_000_000_000, initial_psn=0, mtu=KB):
    return QueuePair(qp_id, (0, 1, 17, 0xC000 + qp_id, 4791), 0, 1, mtu, rate,
                     initial_psn=initial_psn)


def wire(payload):
    return payload


# -- shaper ---------------------------------------------------------------------

def test_split_1mb_into_four_equal_parts():
    subs = shaper_split(wqe(1024 * KB), 4, KB)
    assert [s.size for s in subs] == [256 * KB] * 4


def test_split_with_n1_is_identity():
    (sub,) = shaper_split(wqe(12_345), 1, KB)
    assert sub.size == 12_345 and sub.offset == 0 and sub.index == 0


def test_split_10kb_deals_segments_round_robin():
    subs = shaper_split(wqe(10 * KB), 4, KB)
    assert [s.size for s in subs] == [3 * KB, 3 * KB, 2 * KB, 2 * KB]


@given(st.integers(1, 4_000_000), st.integers(1, 8), st.sampled_from([256, 1024, 4096]))
def test_split_merge_round_trip(size, n, mtu):
    subs = shaper_split(wqe(size), n, mtu)
    assert 1 <= len(subs) <= n
    assert sum(s.size for s in subs) == size
    pos = 0
    for i, s in enumerate(subs):
        assert s.index == i and s.offset == pos
        pos += s.size
    assert pos == size
    full = [s for s in subs[:-1]]
    assert all(s.size % mtu == 0 for s in full)
    segs = [-(-s.size // mtu) for s in subs]
    assert max(segs) - min(segs) <= 1


def test_split_rejects_bad_arguments():
    with pytest.raises(ValueError):
        shaper_split(wqe(10), 0, KB)
    with pytest.raises(ValueError):
        WorkQueueElement(1, 0, 0, 1, 0)


# -- completion bitmap ------------------------------------------------------------

def test_cqe_after_last_bit():
    bm = AckBitmap(7, 4)
    for i in (0, 1, 2):
        assert on_subwqe_complete(bm, i, 10 * i) is None
    cqe = on_subwqe_complete(bm, 3, 99)
    assert (cqe.wqe_id, cqe.complete_time) == (7, 99)


def test_single_subwqe_completes_immediately():
    assert on_subwqe_complete(AckBitmap(1, 1), 0, 5) is not None


def test_cqe_only_after_all_bits_in_every_order():
    for order in itertools.permutations(range(4)):
        bm = AckBitmap(1, 4)
        out = [on_subwqe_complete(bm, i, t) for t, i in enumerate(order)]
        assert [c is not None for c in out] == [False, False, False, True]
        assert bm.popcount == 4


def test_double_completion_is_fatal():
    bm = AckBitmap(1, 2)
    on_subwqe_complete(bm, 0, 0)
    with pytest.raises(SimulationError):
        on_subwqe_complete(bm, 0, 1)
    with pytest.raises(SimulationError):
        on_subwqe_complete(bm, 5, 1)


# -- receiver ---------------------------------------------------------------------

def at_expected(e):
    r = GbnReceiver(0)
    r.expected_psn = e
    return r


def test_in_order_packet_is_acked():
    r = at_expected(3)
    assert on_receive_data(r, 3, KB) == (ACK, 3)
    assert r.expected_psn == 4


def test_gap_is_naked_and_packet_dropped():
    r = at_expected(3)
    assert on_receive_data(r, 5, KB) == (NAK, 3)
    assert r.expected_psn == 3 and r.delivered_bytes == 0


def test_duplicate_is_reacked():
    r = at_expected(3)
    assert on_receive_data(r, 2, KB) == (ACK, 2)
    assert r.expected_psn == 3


def oracle(arrivals, initial=0):
    """Reference GBN responder on unbounded integers.

    One NAK per sequence gap; a NAK is re-armed only by in-order progress.
    """
    expected = initial
    naked_at = None
    out = []
    for p in arrivals:
        if p == expected:
            expected += 1
            out.append(("ack", p))
        elif p > expected:
            if naked_at == expected:
                out.append(None)
            else:
                naked_at = expected
                out.append(("nak", expected))
        else:
            out.append(("ack", expected - 1))
    return out, expected


def run_receiver(arrivals, initial=0):
    r = GbnReceiver(initial % PSN_MOD)
    out = []
    for p in arrivals:
        resp = r.on_data(p % PSN_MOD, 1)
        if resp is None:
            out.append(None)
        else:
            kind, psn = resp
            # unwrap against the oracle's integer line
            out.append(("ack" if kind is ACK else "nak", psn))
    return out, r


def unwrap(out, initial):
    base = initial - initial % PSN_MOD
    res = []
    for x in out:
        if x is None:
            res.append(None)
            continue
        kind, psn = x
        v = base + psn
        if v < initial - PSN_MOD // 2:
            v += PSN_MOD
        elif v > initial + PSN_MOD // 2:
            v -= PSN_MOD
        res.append((kind, v))
    return res


def test_exhaustive_reorderings_match_oracle():
    for n in range(1, 7):
        for perm in itertools.permutations(range(n)):
            for initial in (0, PSN_MOD - 3):
                arrivals = [initial + p for p in perm]
                got, r = run_receiver(arrivals, initial)
                want, expected = oracle(arrivals, initial)
                assert unwrap(got, initial) == want
                assert r.expected_psn == expected % PSN_MOD


@settings(max_examples=300)
@given(st.lists(st.integers(0, 63), min_size=1, max_size=64),
       st.sampled_from([0, 12345, PSN_MOD - 20]))
def test_random_traces_match_oracle(offsets, initial):
    arrivals = [initial + o for o in offsets]
    got, r = run_receiver(arrivals, initial)
    want, expected = oracle(arrivals, initial)
    assert unwrap(got, initial) == want
    assert r.expected_psn == expected % PSN_MOD


def test_psn_arithmetic_wraps():
    assert psn_add(PSN_MOD - 1, 2) == 1
    assert psn_diff(1, PSN_MOD - 1) == 2
    assert psn_diff(PSN_MOD - 1, 1) == -2


# -- requester --------------------------------------------------------------------

def test_segments_with_consecutive_psns():
    qp = make_qp(initial_psn=40)
    (sub,) = shaper_split(wqe(2560), 1, KB)
    qp.post(sub)
    pkts = []
    now = 0
    while qp.has_data:
        pkts.append(qp.take_packet(now, wire))
        now = qp.next_send_time
    assert [p[0] for p in pkts] == [40, 41, 42]
    assert [p[1] for p in pkts] == [KB, KB, 512]
    assert pkts[0][2] and pkts[-1][3]


def test_independent_psn_sequences_per_qp():
    a, b = make_qp(1), make_qp(2)
    subs = shaper_split(wqe(4 * KB), 2, KB)
    a.post(subs[0])
    b.post(subs[1])
    assert [a.take_packet(0, wire)[0], a.take_packet(0, wire)[0]] == [0, 1]
    assert b.take_packet(0, wire)[0] == 0


def test_inter_departure_at_10g():
    qp = make_qp()
    qp.post(shaper_split(wqe(4 * KB), 1, KB)[0])
    qp.take_packet(1000, wire)
    # 8192 bits at 10 Gbps is 819.2 ns; pacing rounds up to whole nanoseconds
    assert qp.next_send_time - 1000 == 820


def test_nak_rewinds_window():
    qp = make_qp()
    qp.post(shaper_split(wqe(11 * KB), 1, KB)[0])
    for _ in range(11):
        qp.take_packet(0, wire)
    assert on_receive_ack_nak(qp, ACK, 2, 0) is False
    assert qp.on_nak(3, 0) == 8
    assert qp.snd_nxt == 3 and qp.nak_retx_packets == 8


def test_final_ack_completes_subwqe():
    qp = make_qp()
    qp.post(shaper_split(wqe(3 * KB), 1, KB)[0])
    for _ in range(3):
        qp.take_packet(0, wire)
    assert on_receive_ack_nak(qp, ACK, 1, 0) is False
    assert on_receive_ack_nak(qp, ACK, 2, 0) is True


def test_stale_ack_is_ignored():
    qp = make_qp()
    qp.post(shaper_split(wqe(5 * KB), 1, KB)[0])
    for _ in range(5):
        qp.take_packet(0, wire)
    qp.on_ack(3, 0)
    before = (qp.snd_una, qp.snd_nxt)
    assert qp.on_ack(1, 0) is False
    assert (qp.snd_una, qp.snd_nxt) == before
    assert qp.stale_acks == 1


def replay(sizes, seed, reorder_prob):
    """GBN requester and responder over a channel that may overtake packets."""
    rng = random.Random(seed)
    qp = make_qp(initial_psn=PSN_MOD - 5)
    for i, s in enumerate(sizes):
        qp.post(shaper_split(wqe(s, i + 1), 1, KB)[0])
    delivered = []
    done = []
    channel = []
    sent_payload = 0
    steps = 0
    while qp.active is not None:
        steps += 1
        assert steps < 200_000
        while qp.has_data and len(channel) < 8:
            psn, payload, _, last = qp.take_packet(0, wire)
            sent_payload += payload
            channel.append((psn, payload, last))
        if not channel:
            # a suppressed NAK leaves nothing in flight; the RTO recovers
            assert qp.on_timeout(0) > 0
            continue
        i = rng.randrange(len(channel)) if rng.random() < reorder_prob else 0
        psn, payload, last = channel.pop(i)
        before = qp.receiver.expected_psn
        resp = qp.receiver.on_data(psn, payload, last)
        if qp.receiver.expected_psn != before:
            delivered.append(psn)
        if resp is None:
            continue
        kind, rpsn = resp
        if kind is NAK:
            channel.clear()  # resend supersedes whatever is still in flight
        if on_receive_ack_nak(qp, kind, rpsn, 0):
            done.append(qp.complete_active(0))
            channel.clear()
    return qp, delivered, done, sent_payload


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 20 * KB), min_size=1, max_size=4),
       st.integers(0, 10_000), st.sampled_from([0.0, 0.2, 0.6]))
def test_replay_delivers_in_order_and_conserves_bytes(sizes, seed, p):
    qp, delivered, done, sent_payload = replay(sizes, seed, p)
    total_packets = sum(-(-s // KB) for s in sizes)
    assert delivered == [psn_add(PSN_MOD - 5, k) for k in range(total_packets)]
    assert [d.size for d in done] == sizes
    assert qp.receiver.delivered_bytes == sum(sizes)
    assert sent_payload == sum(sizes) + qp.retx_bytes
    if p == 0.0:
        assert qp.retx_packets == 0
