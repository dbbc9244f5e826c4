"""RoCE-style host transport: WQE splitting, per-QP Go-Back-N, CQE aggregation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .congestion import DcqcnParams, DcqcnState
from .engine import SimulationError
from .switch import ACK, NAK, flow_key

PSN_BITS = 24
PSN_MOD = 1 << PSN_BITS
PSN_MASK = PSN_MOD - 1
MAX_WINDOW_PACKETS = (1 << 23) - 1
ROCE_UDP_PORT = 4791
UDP = 17
DATA_HEADER_BYTES = 58  # Eth + IPv4 + UDP + BTH + RETH/ICRC + FCS, rounded


def psn_add(psn: int, k: int) -> int:
    return (psn + k) & PSN_MASK


def psn_diff(a: int, b: int) -> int:
    """Signed distance a - b in 24-bit serial-number arithmetic."""
    d = (a - b) & PSN_MASK
    return d - PSN_MOD if d >= PSN_MOD // 2 else d


@dataclass
class WorkQueueElement:
    wqe_id: int
    size: int
    src_host: int
    dst_host: int
    submit_time: int

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("a WQE carries at least one byte")


@dataclass
class SubWQE:
    parent: int
    index: int
    size: int
    offset: int  # byte offset inside the parent message
    qp: "QueuePair | None" = None


@dataclass
class CompletionQueueElement:
    wqe_id: int
    complete_time: int


def shaper_split(wqe: WorkQueueElement, n: int, mtu: int,
                 qps: list | None = None) -> list[SubWQE]:
    """Split a WQE into at most ``n`` MTU-granular, balanced sub-WQEs.

    Segments are dealt round-robin so sibling sizes differ by at most one
    MTU; the remainder segment lands in the last non-empty bin.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mtu < 256:
        raise ValueError("mtu must be >= 256 bytes")
    segments = -(-wqe.size // mtu)
    parts = min(n, segments)
    base, extra = divmod(segments, parts)
    counts = [base + (1 if i < extra else 0) for i in range(parts)]
    tail = wqe.size - (segments - 1) * mtu  # size of the final, possibly short segment
    subs = []
    offset = 0
    for i, c in enumerate(counts):
        size = c * mtu
        if i == parts - 1:
            size = (c - 1) * mtu + tail
        subs.append(SubWQE(wqe.wqe_id, i, size, offset))
        offset += size
    if qps is not None:
        if len(qps) < parts:
            raise ValueError("not enough QPs for the sub-WQEs")
        for sub, qp in zip(subs, qps):
            sub.qp = qp
    return subs


def _sizes_in_order(subs):
    return [s.size for s in subs]


@dataclass
class AckBitmap:
    parent: int
    n: int
    bits: int = 0
    completed: bool = False

    def is_set(self, index: int) -> bool:
        return bool(self.bits >> index & 1)

    @property
    def popcount(self) -> int:
        return bin(self.bits).count("1")


def on_subwqe_complete(bitmap: AckBitmap, index: int,
                       now: int) -> CompletionQueueElement | None:
    if not 0 <= index < bitmap.n:
        raise SimulationError(f"sub-WQE index {index} outside 0..{bitmap.n - 1}")
    if bitmap.is_set(index):
        raise SimulationError(
            f"sub-WQE {index} of WQE {bitmap.parent} completed twice")
    bitmap.bits |= 1 << index
    if bitmap.popcount == bitmap.n:
        bitmap.completed = True
        return CompletionQueueElement(bitmap.parent, now)
    return None


# -- receiver (responder) side -------------------------------------------------

class GbnReceiver:
    """Responder PSN check.

    In-order packets are accepted and acknowledged, duplicates re-acknowledge
    ``expected - 1``, and a gap triggers a NAK for ``expected``. While a NAK is
    outstanding for the same expected PSN, further out-of-order packets are
    dropped silently unless ``nak_interval`` has elapsed.
    """

    __slots__ = ("expected_psn", "nak_sent", "nak_time", "nak_interval",
                 "ack_every", "_since_ack", "delivered_bytes", "delivered_packets",
                 "discarded", "duplicates", "last_cnp", "naks_sent")

    def __init__(self, initial_psn: int = 0, nak_interval: int | None = None,
                 ack_every: int = 1):
        self.expected_psn = initial_psn & PSN_MASK
        self.nak_sent = False
        self.nak_time = 0
        self.nak_interval = nak_interval
        self.ack_every = max(1, ack_every)
        self._since_ack = 0
        self.delivered_bytes = 0
        self.delivered_packets = 0
        self.discarded = 0
        self.duplicates = 0
        self.last_cnp = None
        self.naks_sent = 0

    def on_data(self, psn: int, payload: int, last: bool = True,
                now: int = 0) -> tuple | None:
        d = psn_diff(psn, self.expected_psn)
        if d == 0:
            self.expected_psn = (psn + 1) & PSN_MASK
            self.nak_sent = False
            self.delivered_bytes += payload
            self.delivered_packets += 1
            self._since_ack += 1
            if last or self._since_ack >= self.ack_every:
                self._since_ack = 0
                return (ACK, psn)
            return None
        if d > 0:
            self.discarded += 1
            if (not self.nak_sent or (self.nak_interval is not None
                                      and now - self.nak_time >= self.nak_interval)):
                self.nak_sent = True
                self.nak_time = now
                self.naks_sent += 1
                return (NAK, self.expected_psn)
            return None
        self.duplicates += 1
        return (ACK, (self.expected_psn - 1) & PSN_MASK)


def on_receive_data(receiver: GbnReceiver, psn: int, payload: int = 0,
                    last: bool = True, now: int = 0) -> tuple | None:
    return receiver.on_data(psn, payload, last, now)


# -- requester side ---------------------------------------------------------------

@dataclass(frozen=True)
class GbnParams:
    """Requester retransmission behaviour.

    ``restart_delay`` and ``retx_rate_fraction`` model the RNIC slow path
    that performs go-back-N recovery: after a NAK the QP stays idle for
    ``restart_delay`` and then sends the rest of the current sub-WQE, from the
    NAKed packet on, at a fraction of its current rate.
    """

    restart_delay: int = 56_500  # ns
    retx_rate_fraction: float = 0.22
    rto: int = 4_000_000  # ns
    nak_interval: int | None = None
    ack_every: int = 1


class QueuePair:
    """Requester-side QP: PSN counters, GBN window, DCQCN pacing state.

    Internally packets are numbered by an unbounded index; the wire PSN is
    ``(initial_psn + index) mod 2**24``.
    """

    def __init__(self, qp_id: int, five_tuple: tuple, src_host: int, dst_host: int,
                 mtu: int, line_rate: int, window_bytes: int = 0,
                 dcqcn: DcqcnParams | None = None, gbn: GbnParams | None = None,
                 initial_psn: int = 0):
        self.qp_id = qp_id
        self.five_tuple = five_tuple
        self.fkey = flow_key(five_tuple)
        self.src_host = src_host
        self.dst_host = dst_host
        self.mtu = mtu
        self.gbn = gbn or GbnParams()
        self.initial_psn = initial_psn & PSN_MASK
        self.receiver = GbnReceiver(initial_psn, self.gbn.nak_interval, self.gbn.ack_every)
        self.dcqcn = DcqcnState(line_rate, dcqcn)
        win_pkts = MAX_WINDOW_PACKETS if window_bytes <= 0 else max(1, window_bytes // mtu)
        self.window_packets = min(win_pkts, MAX_WINDOW_PACKETS)
        self.pending: deque[SubWQE] = deque()
        self.active: SubWQE | None = None
        self.first_idx = 0
        self.end_idx = 0
        self.snd_una = 0
        self.snd_nxt = 0
        self.max_sent = 0
        self.next_send_time = 0
        self.recovery_end = -1
        self.last_progress = 0
        self.rto_armed = False
        self.retx_packets = 0
        self.retx_bytes = 0
        self.nak_retx_packets = 0
        self.timeout_retx_packets = 0
        self.naks = 0
        self.timeouts = 0
        self.sent_packets = 0
        self.sent_bytes = 0
        self.active_retx_bytes = 0
        self.stale_acks = 0

    def __repr__(self) -> str:
        return (f"QueuePair({self.qp_id}, una={self.snd_una}, nxt={self.snd_nxt}, "
                f"end={self.end_idx})")

    # -- psn helpers -----------------------------------------------------------
    @property
    def next_psn(self) -> int:
        return (self.initial_psn + self.snd_nxt) & PSN_MASK

    @property
    def expected_psn(self) -> int:
        return self.receiver.expected_psn

    def psn_of(self, idx: int) -> int:
        return (self.initial_psn + idx) & PSN_MASK

    def index_of(self, psn: int) -> int:
        return self.snd_una + psn_diff(psn, self.psn_of(self.snd_una))

    def packet_payload(self, idx: int) -> int:
        if idx == self.end_idx - 1:
            return self.active.size - (self.end_idx - self.first_idx - 1) * self.mtu
        return self.mtu

    # -- work ----------------------------------------------------------------
    def post(self, sub: SubWQE) -> bool:
        """Queue a sub-WQE; True when it became the active one."""
        sub.qp = self
        self.pending.append(sub)
        if self.active is None:
            self._activate_next(0)
            return True
        return False

    def _activate_next(self, now: int) -> None:
        if not self.pending:
            self.active = None
            return
        sub = self.active = self.pending.popleft()
        npkts = -(-sub.size // self.mtu)
        self.first_idx = self.snd_nxt
        self.end_idx = self.snd_nxt + npkts
        self.max_sent = max(self.max_sent, self.snd_nxt)
        self.active_retx_bytes = 0
        self.last_progress = now

    @property
    def has_data(self) -> bool:
        return (self.active is not None and self.snd_nxt < self.end_idx
                and self.snd_nxt - self.snd_una < self.window_packets)

    @property
    def outstanding(self) -> int:
        return self.snd_nxt - self.snd_una

    def take_packet(self, now: int, wire_size_of) -> tuple[int, int, bool, bool]:
        """Advance ``snd_nxt``; returns (psn, payload, is_first, is_last)."""
        idx = self.snd_nxt
        payload = self.packet_payload(idx)
        wire = wire_size_of(payload)
        self.snd_nxt = idx + 1
        retx = idx < self.max_sent
        if retx:
            self.retx_packets += 1
            self.retx_bytes += payload
            self.active_retx_bytes += payload
        else:
            self.max_sent = idx + 1
        self.sent_packets += 1
        self.sent_bytes += wire
        rate = self.dcqcn.current_rate
        if idx < self.recovery_end:
            rate *= self.gbn.retx_rate_fraction
        self.next_send_time = now + -(-wire * 8_000_000_000 // int(rate))
        first = idx == self.first_idx and not retx
        return self.psn_of(idx), payload, first, idx == self.end_idx - 1

    # -- acknowledgements -------------------------------------------------------
    def on_ack(self, psn: int, now: int) -> bool:
        """Cumulative ACK; True when the active sub-WQE just completed."""
        if self.active is None:
            self.stale_acks += 1
            return False
        idx = self.index_of(psn)
        if idx < self.snd_una or idx >= self.max_sent:
            self.stale_acks += 1
            return False
        self.snd_una = idx + 1
        if self.snd_nxt < self.snd_una:
            self.snd_nxt = self.snd_una
        self.last_progress = now
        return self.snd_una >= self.end_idx

    def on_nak(self, psn: int, now: int) -> int:
        """Go back to ``psn``; returns the number of packets that will be resent."""
        if self.active is None:
            self.stale_acks += 1
            return 0
        idx = self.index_of(psn)
        if idx < self.snd_una or idx > self.snd_nxt:
            self.stale_acks += 1
            return 0
        self.naks += 1
        self.snd_una = idx
        resend = self.max_sent - idx
        self.snd_nxt = idx
        self.recovery_end = self.end_idx
        self.nak_retx_packets += resend
        self.next_send_time = max(self.next_send_time, now + self.gbn.restart_delay)
        self.last_progress = now
        return resend

    def on_timeout(self, now: int) -> int:
        if self.active is None or self.snd_una >= self.snd_nxt:
            return 0
        self.timeouts += 1
        resend = self.max_sent - self.snd_una
        self.timeout_retx_packets += resend
        self.snd_nxt = self.snd_una
        self.recovery_end = self.max_sent
        self.last_progress = now
        return resend

    def complete_active(self, now: int) -> SubWQE:
        sub = self.active
        self._activate_next(now)
        return sub


def on_receive_ack_nak(qp: QueuePair, kind, psn: int, now: int):
    """Apply an ACK or NAK; returns True when the active sub-WQE completed."""
    if kind is ACK:
        return qp.on_ack(psn, now)
    if kind is NAK:
        qp.on_nak(psn, now)
        return False
    raise ValueError(f"not an ACK/NAK: {kind}")


@dataclass
class MessageState:
    wqe: WorkQueueElement
    bitmap: AckBitmap
    subs: list[SubWQE] = field(default_factory=list)
    retx_bytes: int = 0
    last_ack_time: int = 0
