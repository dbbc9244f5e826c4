"""Output-queued switch ports, load-balancing selectors and SeqBalance ToR state."""

from __future__ import annotations

import enum
import struct
from collections import deque
from dataclasses import dataclass

from .congestion import EcnConfig, ecn_mark_probability
from .engine import EventKind, SimulationError, mix64
from .topology import MAX_PATH_TAG, Path

CONGESTION_PACKET_BYTES = 64
CONTROL_PACKET_BYTES = 64


class PacketKind(enum.IntEnum):
    DATA = 1
    ACK = 2
    NAK = 3
    CONGESTION = 4
    PAUSE = 5
    RESUME = 6
    CNP = 7


DATA = PacketKind.DATA
ACK = PacketKind.ACK
NAK = PacketKind.NAK
CONGESTION = PacketKind.CONGESTION
CNP = PacketKind.CNP


class Packet:
    __slots__ = ("kind", "size", "src_host", "dst_host", "src_tor", "dst_tor",
                 "five_tuple", "fkey", "psn", "ecn_marked", "path_tag", "route",
                 "hop", "subflow_first", "qp", "in_link", "ce_max", "feedback",
                 "last", "idx", "payload")

    def __init__(self, kind, size, src_host, dst_host, src_tor, dst_tor,
                 five_tuple=None, fkey=0, psn=0, qp=None):
        self.kind = kind
        self.size = size
        self.src_host = src_host
        self.dst_host = dst_host
        self.src_tor = src_tor
        self.dst_tor = dst_tor
        self.five_tuple = five_tuple
        self.fkey = fkey
        self.psn = psn
        self.qp = qp
        self.ecn_marked = False
        self.path_tag = 0
        self.route = None
        self.hop = 0
        self.subflow_first = False
        self.in_link = None
        self.ce_max = 0
        self.feedback = None
        self.last = False
        self.idx = -1
        self.payload = 0

    def __repr__(self) -> str:
        return (f"Packet({self.kind.name}, psn={self.psn}, size={self.size}, "
                f"{self.src_host}->{self.dst_host}, tag={self.path_tag})")


def flow_key(five_tuple: tuple) -> int:
    return mix64(*five_tuple)


# -- Congestion Packet wire codec -------------------------------------------

_CONGESTION_FMT = ">BHHH"


def encode_congestion(path_tag: int, src_tor: int, dst_tor: int) -> bytes:
    """kind byte, 10-bit tag in a 16-bit field (upper 6 bits zero), ToR ids."""
    if not 1 <= path_tag <= MAX_PATH_TAG:
        raise ValueError(f"path tag {path_tag} outside 1..{MAX_PATH_TAG}")
    return struct.pack(_CONGESTION_FMT, int(CONGESTION), path_tag & 0x3FF,
                       src_tor, dst_tor)


def decode_congestion(raw: bytes) -> tuple[int, int, int]:
    kind, tag_field, src_tor, dst_tor = struct.unpack(_CONGESTION_FMT, raw)
    if kind != CONGESTION:
        raise ValueError(f"not a CONGESTION packet (kind byte {kind})")
    if tag_field >> 10:
        raise ValueError("reserved upper bits of the PathTag field are set")
    if tag_field == 0:
        raise ValueError("CONGESTION packet must carry a non-zero PathTag")
    return tag_field, src_tor, dst_tor


# -- output queue ------------------------------------------------------------

class OutputQueue:
    """Egress port of a switch: FIFO, ECN marking at enqueue, PFC-pausable.

    The port doubles as the upstream end of a link, so the downstream
    switch keeps its per-ingress PFC accounting here as well.
    """

    __slots__ = ("sim", "name", "owner", "peer", "peer_receive", "rate", "delay",
                 "capacity", "fifo", "qbytes", "busy_until", "tx_size", "paused",
                 "dequeue_pending", "ecn", "mark_rng", "pfc", "drops",
                 "tx_bytes", "tx_packets", "marks", "_tx_cache", "ingress_bytes",
                 "pause_sent", "headroom", "pause_frames", "resume_frames",
                 "max_ingress", "paused_ns", "_paused_since", "dropped_data")

    def __init__(self, sim, name, owner, peer, rate: int, delay: int, capacity: int,
                 ecn: EcnConfig | None = None, mark_rng=None, pfc=None):
        self.sim = sim
        self.name = name
        self.owner = owner
        self.peer = peer
        self.peer_receive = peer.receive if peer is not None else None
        self.rate = rate
        self.delay = delay
        self.capacity = capacity
        self.fifo: deque = deque()
        self.qbytes = 0
        self.busy_until = 0
        self.tx_size = 0
        self.paused = False
        self.dequeue_pending = False
        self.ecn = ecn
        self.mark_rng = mark_rng
        self.pfc = pfc  # PfcConfig of the downstream switch, None when disabled
        self.drops = 0
        self.dropped_data = 0
        self.tx_bytes = 0
        self.tx_packets = 0
        self.marks = 0
        self._tx_cache: dict[int, int] = {}
        self.ingress_bytes = 0
        self.pause_sent = False
        self.headroom = 0
        self.pause_frames = 0
        self.resume_frames = 0
        self.max_ingress = 0
        self.paused_ns = 0
        self._paused_since = 0

    def __repr__(self) -> str:
        return f"OutputQueue({self.name}, occ={self.occupancy})"

    def tx_time(self, size: int) -> int:
        t = self._tx_cache.get(size)
        if t is None:
            t = self._tx_cache[size] = -(-size * 8_000_000_000 // self.rate)
        return t

    @property
    def occupancy(self) -> int:
        if self.sim.now < self.busy_until:
            return self.qbytes + self.tx_size
        return self.qbytes

    def enqueue(self, pkt: Packet) -> bool:
        now = self.sim.now
        size = pkt.size
        occ = self.qbytes + self.tx_size if now < self.busy_until else self.qbytes
        ecn = self.ecn
        if ecn is not None and pkt.kind is DATA and occ >= ecn.k_min:
            if self.mark_rng.random() < ecn_mark_probability(occ, ecn):
                pkt.ecn_marked = True
                self.marks += 1
        if self.pfc is None and occ + size > self.capacity:
            self.drop(pkt)
            return False
        if self.fifo or self.paused or now < self.busy_until:
            self.fifo.append(pkt)
            self.qbytes += size
            if not self.dequeue_pending and not self.paused:
                self.dequeue_pending = True
                self.sim.call_at(max(now, self.busy_until), EventKind.PACKET_DEQUEUE,
                                 self._dequeue, None)
        else:
            self._start(pkt, now)
        return True

    def drop(self, pkt: Packet) -> None:
        self.drops += 1
        if pkt.kind is DATA:
            self.dropped_data += 1
        link = pkt.in_link
        if link is not None and link.pfc is not None:
            link.release(pkt.size)

    def _start(self, pkt: Packet, now: int) -> None:
        size = pkt.size
        t = self._tx_cache.get(size)
        if t is None:
            t = self.tx_time(size)
        done = now + t
        self.busy_until = done
        self.tx_size = size
        self.tx_bytes += size
        self.tx_packets += 1
        link = pkt.in_link
        if link is not None and link.pfc is not None:
            link.release(size)
        pkt.in_link = self
        self.sim.call_at(done + self.delay, EventKind.PACKET_ARRIVAL,
                         self.peer_receive, pkt)

    def _dequeue(self, _) -> None:
        self.dequeue_pending = False
        if self.paused or not self.fifo:
            return
        now = self.sim.now
        pkt = self.fifo.popleft()
        self.qbytes -= pkt.size
        self._start(pkt, now)
        if self.fifo:
            self.dequeue_pending = True
            self.sim.call_at(self.busy_until, EventKind.PACKET_DEQUEUE,
                             self._dequeue, None)

    # -- PFC: this port's downstream buffer accounting -----------------------
    def admit(self, size: int) -> bool:
        """Account an arriving packet at the downstream ingress; False on overflow."""
        cfg = self.pfc
        self.ingress_bytes += size
        if self.ingress_bytes > cfg.pause_threshold + self.headroom:
            self.ingress_bytes -= size
            return False
        if self.ingress_bytes > self.max_ingress:
            self.max_ingress = self.ingress_bytes
        if not self.pause_sent and self.ingress_bytes >= cfg.pause_threshold:
            self.pause_sent = True
            self.pause_frames += 1
            self.sim.call_at(self.sim.now + self.delay, EventKind.PACKET_ARRIVAL,
                             self.set_paused, True)
        return True

    def release(self, size: int) -> None:
        self.ingress_bytes -= size
        if self.pause_sent and self.ingress_bytes <= self.pfc.resume_threshold:
            self.pause_sent = False
            self.resume_frames += 1
            self.sim.call_at(self.sim.now + self.delay, EventKind.PACKET_ARRIVAL,
                             self.set_paused, False)

    def set_paused(self, paused: bool) -> None:
        if paused == self.paused:
            return
        now = self.sim.now
        self.paused = paused
        if paused:
            self._paused_since = now
            return
        self.paused_ns += now - self._paused_since
        if self.fifo and not self.dequeue_pending:
            self.dequeue_pending = True
            self.sim.call_at(max(now, self.busy_until), EventKind.PACKET_DEQUEUE,
                             self._dequeue, None)
        if self.owner is not None and hasattr(self.owner, "on_resume"):
            self.owner.on_resume()


# -- selectors ----------------------------------------------------------------

def ecmp_index(fkey: int, salt: int, n: int) -> int:
    return mix64(fkey, salt) % n


def ecmp_select(five_tuple: tuple, uplinks: list, salt: int):
    if not uplinks:
        raise ValueError("ECMP needs at least one uplink")
    return uplinks[ecmp_index(flow_key(five_tuple), salt, len(uplinks))]


@dataclass
class FlowletEntry:
    flow_hash: int
    last_seen: int
    assigned_uplink: object


class FlowletTable:
    def __init__(self):
        self.entries: dict[int, FlowletEntry] = {}
        self.flowlets = 0

    def lookup(self, flow_hash: int, now: int, gap: int):
        e = self.entries.get(flow_hash)
        if e is not None and now - e.last_seen <= gap:
            e.last_seen = now
            return e.assigned_uplink
        return None

    def record(self, flow_hash: int, now: int, uplink) -> None:
        self.flowlets += 1
        self.entries[flow_hash] = FlowletEntry(flow_hash, now, uplink)


def letflow_select(flow_hash: int, now: int, table: FlowletTable, gap: int,
                   uplinks: list, rng):
    port = table.lookup(flow_hash, now, gap)
    if port is None:
        port = uplinks[rng.randrange(len(uplinks))]
        table.record(flow_hash, now, port)
    return port


class DrillMemory:
    __slots__ = ("best",)

    def __init__(self):
        self.best: int | None = None


def drill_select(queues: list[int], d: int, memory: DrillMemory, rng) -> int:
    """Index of the least-occupied uplink among d random samples plus memory."""
    if d < 1:
        raise ValueError("DRILL needs d >= 1")
    n = len(queues)
    sampled = rng.sample(range(n), min(d, n))
    best = memory.best
    if best is None or best >= n:
        best = sampled[0]
    for i in sampled:
        if queues[i] < queues[best]:
            best = i
    memory.best = best
    return best


class CongaLiteState:
    """Per-path congestion metric: exponentially decayed max queue occupancy."""

    def __init__(self, half_life: int = 100_000):
        self.half_life = half_life
        self._metric: dict = {}  # (dst_tor, tag) -> (value, stamp)

    def metric(self, dst_tor: int, tag: int, now: int) -> float:
        entry = self._metric.get((dst_tor, tag))
        if entry is None:
            return 0.0
        value, stamp = entry
        return value * 0.5 ** ((now - stamp) / self.half_life)

    def feed(self, dst_tor: int, tag: int, value: float, now: int) -> None:
        cur = self.metric(dst_tor, tag, now)
        self._metric[(dst_tor, tag)] = (max(cur, float(value)), now)


def conga_lite_select(flow_hash: int, dst_tor: int, now: int, state: CongaLiteState,
                      table: FlowletTable, gap: int, paths: list[Path]) -> Path:
    path = table.lookup(flow_hash, now, gap)
    if path is None:
        path = min(paths, key=lambda p: (state.metric(dst_tor, p.tag, now), p.tag))
        table.record(flow_hash, now, path)
    return path


class CongestionTable:
    """Source-ToR table of paths marked inactive until a timestamp."""

    def __init__(self):
        self.inactive_until: dict[tuple[int, int], int] = {}
        self.refreshes = 0

    def refresh(self, dst_tor: int, tag: int, now: int, phi: int) -> None:
        key = (dst_tor, tag)
        until = now + phi
        # restart from phi; never shortens an entry
        if until > self.inactive_until.get(key, 0):
            self.inactive_until[key] = until
        self.refreshes += 1

    def is_inactive(self, dst_tor: int, tag: int, now: int) -> bool:
        return now < self.inactive_until.get((dst_tor, tag), 0)

    def expiry(self, dst_tor: int, tag: int) -> int:
        return self.inactive_until.get((dst_tor, tag), 0)


def seqbalance_on_congestion_packet(table: CongestionTable, dst_tor: int, tag: int,
                                    now: int, phi: int) -> None:
    table.refresh(dst_tor, tag, now, phi)


def seqbalance_source_select(flow_hash: int, dst_tor: int, paths: list[Path],
                             table: CongestionTable, now: int, salt: int,
                             retries: int = 8) -> tuple[Path, bool]:
    """Rehash over paths until an active one is found.

    Returns ``(path, fell_back)``. After ``retries`` inactive hits one more
    hash picks among the active paths; only when every path is inactive is the
    one with the earliest expiry (lowest tag on ties) used, with fell_back set.
    """
    n = len(paths)
    for attempt in range(retries):
        p = paths[mix64(flow_hash, salt, attempt) % n]
        if not table.is_inactive(dst_tor, p.tag, now):
            return p, False
    active = [p for p in paths if not table.is_inactive(dst_tor, p.tag, now)]
    if active:
        return active[mix64(flow_hash, salt, retries) % len(active)], False
    return min(paths, key=lambda p: (table.expiry(dst_tor, p.tag), p.tag)), True


class PinTable:
    def __init__(self):
        self.pins: dict[int, Path] = {}

    def pin(self, flow_hash: int, path: Path) -> None:
        self.pins[flow_hash] = path

    def lookup(self, flow_hash: int) -> Path:
        try:
            return self.pins[flow_hash]
        except KeyError:
            raise SimulationError(
                f"no pinned path for sub-flow {flow_hash:#x} (non-first packet)") from None


def seqbalance_pin_lookup(pkt: Packet, pins: PinTable) -> Path:
    return pins.lookup(pkt.fkey)


class CongestionDedup:
    """Destination-ToR limiter: one CONGESTION packet per (src ToR, tag) per window."""

    def __init__(self, window: int):
        self.window = window
        self._last: dict[tuple[int, int], int] = {}
        self.suppressed = 0

    def allow(self, src_tor: int, tag: int, now: int) -> bool:
        if self.window <= 0:
            return True
        key = (src_tor, tag)
        last = self._last.get(key)
        if last is not None and now - last < self.window:
            self.suppressed += 1
            return False
        self._last[key] = now
        return True


def seqbalance_dest_on_ecn(pkt: Packet, now: int, dedup: CongestionDedup,
                           this_tor: int) -> Packet | None:
    if pkt.kind is not DATA or not pkt.ecn_marked or not pkt.path_tag:
        return None
    if not dedup.allow(pkt.src_tor, pkt.path_tag, now):
        return None
    cp = Packet(CONGESTION, CONGESTION_PACKET_BYTES, None, None, this_tor, pkt.src_tor)
    cp.path_tag = pkt.path_tag
    cp.fkey = mix64(this_tor, pkt.src_tor, pkt.path_tag)
    return cp
