"""Wires hosts, NICs and switches into a runnable fabric for one scheme."""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field

from .congestion import (DcqcnParams, EcnConfig, PfcConfig, alpha_timer_tick,
                         on_congestion_notification, rate_increase_tick)
from .engine import EventKind, SimulationError, Simulator, Stream, mix64
from .metrics import FlowRecord, ImbalanceSample
from .switch import (ACK, CNP, CONGESTION, CONTROL_PACKET_BYTES, DATA, NAK,
                     CongaLiteState, CongestionDedup, CongestionTable, DrillMemory,
                     FlowletTable, OutputQueue, Packet, PinTable, conga_lite_select,
                     drill_select, letflow_select, seqbalance_dest_on_ecn,
                     seqbalance_source_select)
from .topology import Role, Topology
from .transport import (ROCE_UDP_PORT, UDP, AckBitmap, GbnParams, MessageState,
                        QueuePair, WorkQueueElement, on_subwqe_complete, shaper_split)

SCHEMES = ("ecmp", "letflow", "conga_lite", "drill", "seqbalance")
PATH_SCHEMES = ("seqbalance", "conga_lite")

_ARRIVAL = EventKind.PACKET_ARRIVAL
_DEQUEUE = EventKind.PACKET_DEQUEUE
_TIMER = EventKind.TIMER_EXPIRY


@dataclass(frozen=True)
class SchemeParams:
    name: str = "ecmp"
    n: int = 1  # sub-flows per WQE (Shaper); 1 is plain RDMA
    phi: int = 32_000  # ns
    retries: int = 8
    dedup: int | None = None  # ns; None means phi // 4, 0 disables
    flowlet_gap: int = 100_000  # ns
    drill_d: int = 2
    conga_half_life: int = 100_000  # ns
    salt: int = 0

    def __post_init__(self):
        if self.name not in SCHEMES:
            raise ValueError(f"unknown scheme {self.name!r}")
        if self.n < 1:
            raise ValueError("N must be >= 1")
        if self.phi <= 0:
            raise ValueError("phi must be > 0")

    @property
    def dedup_window(self) -> int:
        return self.phi // 4 if self.dedup is None else self.dedup


@dataclass(frozen=True)
class TransportParams:
    mtu: int = 1024
    header_bytes: int = 0
    window_bytes: int = 0
    dcqcn_enabled: bool = True
    dcqcn: DcqcnParams = field(default_factory=DcqcnParams)
    gbn: GbnParams = field(default_factory=GbnParams)
    initial_psn: int = 0


class HostPort(OutputQueue):
    """Host NIC egress. The host pulls packets into it only when it is idle."""

    __slots__ = ()

    def send(self, pkt: Packet, now: int, extra: int = 0) -> None:
        size = pkt.size
        t = self._tx_cache.get(size)
        if t is None:
            t = self.tx_time(size)
        self.busy_until = now + t
        self.tx_size = size
        self.tx_bytes += size
        self.tx_packets += 1
        pkt.in_link = self
        self.sim.call_at(now + t + self.delay + extra, _ARRIVAL, self.peer_receive, pkt)


class Host:
    def __init__(self, net: "Network", hid: int, tor: int):
        self.net = net
        self.sim = net.sim
        self.id = hid
        self.tor = tor
        self.port: HostPort | None = None
        self.ctrl: deque = deque()
        self.active: list[QueuePair] = []
        self.rr = 0
        self.pump_at = -1
        self.qps: dict[int, list[QueuePair]] = {}
        self.data_tx_bytes = 0
        self.ctrl_tx_bytes = 0
        self.cnps_sent = 0

    def __repr__(self) -> str:
        return f"Host({self.id})"

    # -- QP management ------------------------------------------------------
    def qps_to(self, dst: int, n: int) -> list[QueuePair]:
        lst = self.qps.setdefault(dst, [])
        net = self.net
        tp = net.transport
        while len(lst) < n:
            i = len(lst)
            sport = 0xC000 + (mix64(self.id, dst) + i) % 0x4000
            five = (self.id, dst, UDP, sport, ROCE_UDP_PORT)
            qp = QueuePair(next(net._qp_ids), five, self.id, dst, tp.mtu,
                           self.port.rate, tp.window_bytes, tp.dcqcn, tp.gbn,
                           tp.initial_psn)
            qp.ack_fkey = mix64(*(dst, self.id, UDP, ROCE_UDP_PORT, sport))
            qp.rto_armed = False
            qp.disarm_time = 0
            lst.append(qp)
        return lst[:n]

    def post(self, qp: QueuePair, sub) -> None:
        if qp.post(sub):
            qp.last_progress = self.sim.now
            self.active.append(qp)
        self.kick()

    # -- NIC scheduler --------------------------------------------------------
    def kick(self, at: int | None = None) -> None:
        now = self.sim.now
        t = now if at is None or at < now else at
        busy = self.port.busy_until
        if t < busy:
            t = busy  # nothing can leave before the current frame is out
        if self.pump_at >= now and self.pump_at <= t:
            return
        self.pump_at = t
        self.sim.call_at(t, _DEQUEUE, self._pump, t)

    def on_resume(self) -> None:
        self.kick()

    def _pump(self, stamp: int) -> None:
        if stamp != self.pump_at:
            return  # superseded by an earlier wake-up
        self.pump_at = -1
        port = self.port
        if port.paused:
            return
        now = self.sim.now
        if now < port.busy_until:
            self.kick(port.busy_until)
            return
        if self.ctrl:
            pkt = self.ctrl.popleft()
            self.ctrl_tx_bytes += pkt.size
            port.send(pkt, now)
            self.kick(port.busy_until)
            return
        active = self.active
        n = len(active)
        earliest = None
        for k in range(n):
            i = (self.rr + k) % n
            qp = active[i]
            if not qp.has_data:
                continue
            t = qp.next_send_time
            if t <= now:
                self.rr = i + 1
                self._send_data(qp, now)
                self.kick(port.busy_until)
                return
            if earliest is None or t < earliest:
                earliest = t
        if earliest is not None:
            self.kick(earliest)

    def _send_data(self, qp: QueuePair, now: int) -> None:
        net = self.net
        idx = qp.snd_nxt
        fresh = idx >= qp.max_sent
        psn, payload, first, last = qp.take_packet(now, net._wire_size)
        pkt = Packet(DATA, payload + net.header_bytes, self.id, qp.dst_host, self.tor,
                     net.host_tor[qp.dst_host], qp.five_tuple, qp.fkey, psn, qp)
        pkt.payload = payload
        pkt.subflow_first = first
        pkt.last = last
        pkt.idx = idx
        self.data_tx_bytes += pkt.size
        extra = 0
        hold = net.hold
        if hold is not None and fresh and hold[0] == qp.qp_id and hold[1] == idx:
            extra = hold[2]
            net.hold_applied = True
        self.port.send(pkt, now, extra)
        if net.trace is not None and qp.qp_id in net.trace_qps:
            net.trace.append((now, pkt.size))
        if not qp.rto_armed:
            qp.rto_armed = True
            self.sim.call_at(now + qp.gbn.rto, _TIMER, self._rto, qp)

    def _rto(self, qp: QueuePair) -> None:
        now = self.sim.now
        if qp.active is None or qp.snd_una >= qp.max_sent:
            qp.rto_armed = False
            return
        due = qp.last_progress + qp.gbn.rto
        if now >= due:
            qp.on_timeout(now)
            self.kick()
            due = now + qp.gbn.rto
        self.sim.call_at(due, _TIMER, self._rto, qp)

    def send_ctrl(self, pkt: Packet) -> None:
        self.ctrl.append(pkt)
        self.kick()

    # -- receive path -----------------------------------------------------------
    def receive(self, pkt: Packet) -> None:
        kind = pkt.kind
        if kind is DATA:
            self._on_data(pkt)
        elif kind is ACK or kind is NAK:
            self._on_ack(pkt)
        elif kind is CNP:
            self._on_cnp(pkt.qp)
        else:
            raise SimulationError(f"host {self.id} received {kind.name}")

    def _on_data(self, pkt: Packet) -> None:
        now = self.sim.now
        qp = pkt.qp
        r = qp.receiver
        resp = r.on_data(pkt.psn, pkt.payload, pkt.last, now)
        net = self.net
        if pkt.ecn_marked and net.transport.dcqcn_enabled:
            if r.last_cnp is None or now - r.last_cnp >= net.transport.dcqcn.cnp_interval:
                r.last_cnp = now
                self.cnps_sent += 1
                cnp = Packet(CNP, CONTROL_PACKET_BYTES, self.id, pkt.src_host, self.tor,
                             pkt.src_tor, None, qp.ack_fkey, 0, qp)
                self.send_ctrl(cnp)
        if resp is not None:
            kind, psn = resp
            ack = Packet(kind, CONTROL_PACKET_BYTES, self.id, pkt.src_host, self.tor,
                         pkt.src_tor, None, qp.ack_fkey, psn, qp)
            ack.feedback = (pkt.path_tag, pkt.ce_max)
            self.send_ctrl(ack)

    def _on_ack(self, pkt: Packet) -> None:
        now = self.sim.now
        qp = pkt.qp
        if pkt.kind is ACK:
            if qp.on_ack(pkt.psn, now):
                self._complete(qp, now)
        else:
            qp.on_nak(pkt.psn, now)
        self.kick()

    def _complete(self, qp: QueuePair, now: int) -> None:
        retx = qp.active_retx_bytes
        sub = qp.complete_active(now)
        if qp.active is None:
            self.active.remove(qp)
        self.net._subwqe_done(sub, retx, now)

    # -- DCQCN reaction point ------------------------------------------------------
    def _on_cnp(self, qp: QueuePair) -> None:
        st = qp.dcqcn
        now = self.sim.now
        p = st.params
        if not st.timers_armed:
            idle = (now - qp.disarm_time) // p.alpha_timer
            if idle > 0:
                st.alpha *= (1 - p.g) ** idle
            st.timers_armed = True
            self.sim.call_at(now + p.alpha_timer, _TIMER, self._alpha_tick, qp)
        on_congestion_notification(st)
        self.sim.call_at(now + p.increase_timer, _TIMER, self._increase_tick,
                         (qp, st.generation))

    def _alpha_tick(self, qp: QueuePair) -> None:
        st = qp.dcqcn
        alpha_timer_tick(st)
        if st.at_line_rate and not st.cnp_seen:
            st.timers_armed = False
            qp.disarm_time = self.sim.now
            return
        self.sim.call_at(self.sim.now + st.params.alpha_timer, _TIMER,
                         self._alpha_tick, qp)

    def _increase_tick(self, payload) -> None:
        qp, gen = payload
        st = qp.dcqcn
        if gen != st.generation:
            return
        rate_increase_tick(st)
        if not st.at_line_rate:
            self.sim.call_at(self.sim.now + st.params.increase_timer, _TIMER,
                             self._increase_tick, payload)


class Switch:
    def __init__(self, net: "Network", sid: int, role: Role):
        self.net = net
        self.sim = net.sim
        self.id = sid
        self.role = role
        self.is_tor = role is Role.TOR
        self.ports: dict[int, OutputQueue] = {}
        self.next_hops: dict[int, list[OutputQueue]] = {}
        self.uplinks: list[OutputQueue] = []
        self.salt = mix64(net.hash_salt, sid)
        self.ecmp_cache: dict[int, OutputQueue] = {}
        self.flowlets = FlowletTable()
        self.drill: dict[int, DrillMemory] = {}
        self.ingress_drops = 0
        # SeqBalance / CONGA-lite ToR state
        self.table = CongestionTable()
        self.pins = PinTable()
        self.dedup = CongestionDedup(net.scheme.dedup_window)
        self.conga = CongaLiteState(net.scheme.conga_half_life)
        self.conga_flowlets = FlowletTable()
        self.selections = 0
        self.fallbacks = 0
        self.inactive_hits = 0
        self.congestion_sent = 0
        self.congestion_rx = 0
        self.congestion_rx_bytes = 0

    def __repr__(self) -> str:
        return f"Switch({self.role.value}{self.id})"

    def receive(self, pkt: Packet) -> None:
        link = pkt.in_link
        if link is not None and link.pfc is not None and not link.admit(pkt.size):
            self.ingress_drops += 1
            return
        net = self.net
        dst_tor = pkt.dst_tor
        if dst_tor == self.id:
            self._deliver_local(pkt, link)
            return
        route = pkt.route
        if route is not None:
            h = pkt.hop + 1
            pkt.hop = h
            port = self.ports[route[h]]
            if net.track_ce:
                occ = port.occupancy
                if occ > pkt.ce_max:
                    pkt.ce_max = occ
            port.enqueue(pkt)
            return
        if self.is_tor and net.path_scheme and pkt.src_tor == self.id:
            if self._source_route(pkt):
                return
        cands = self.next_hops[dst_tor]
        if len(cands) == 1:
            port = cands[0]
        else:
            port = self._per_hop(pkt, cands, dst_tor)
        port.enqueue(pkt)

    # -- destination side ------------------------------------------------------
    def _deliver_local(self, pkt: Packet, link) -> None:
        kind = pkt.kind
        net = self.net
        if kind is CONGESTION:
            self.congestion_rx += 1
            self.congestion_rx_bytes += pkt.size
            self.table.refresh(pkt.src_tor, pkt.path_tag, self.sim.now, net.scheme.phi)
            if link is not None and link.pfc is not None:
                link.release(pkt.size)
            return
        if pkt.src_tor != self.id:
            if kind is DATA:
                if net.seqbalance and pkt.ecn_marked:
                    cp = seqbalance_dest_on_ecn(pkt, self.sim.now, self.dedup, self.id)
                    if cp is not None:
                        self.congestion_sent += 1
                        self._inject(cp)
            elif net.track_ce and pkt.feedback is not None:
                tag, ce = pkt.feedback
                if tag:
                    self.conga.feed(pkt.src_tor, tag, ce, self.sim.now)
        self.ports[pkt.dst_host].enqueue(pkt)

    def _inject(self, pkt: Packet) -> None:
        """Send a locally generated packet toward pkt.dst_tor via ECMP."""
        cands = self.next_hops[pkt.dst_tor]
        port = cands[0] if len(cands) == 1 else self._ecmp(pkt, cands)
        port.enqueue(pkt)

    # -- source-ToR path schemes ----------------------------------------------------
    def _source_route(self, pkt: Packet) -> bool:
        net = self.net
        now = self.sim.now
        kind = pkt.kind
        dst_tor = pkt.dst_tor
        topo = net.topology
        if kind is DATA:
            paths = topo.paths(self.id, dst_tor)
            if net.seqbalance:
                if pkt.subflow_first:
                    path, fell = seqbalance_source_select(
                        pkt.fkey, dst_tor, paths, self.table, now, net.hash_salt,
                        net.scheme.retries)
                    self.selections += 1
                    if fell:
                        self.fallbacks += 1
                    elif self.table.is_inactive(dst_tor, path.tag, now):
                        self.inactive_hits += 1
                    self.pins.pin(pkt.fkey, path)
                    net.pin_log.append((pkt.qp.qp_id, pkt.idx, path.tag))
                else:
                    path = self.pins.lookup(pkt.fkey)
            else:
                path = conga_lite_select(pkt.fkey, dst_tor, now, self.conga,
                                         self.conga_flowlets, net.scheme.flowlet_gap, paths)
            pkt.path_tag = path.tag
        elif (kind is ACK or kind is NAK) and pkt.feedback is not None and pkt.feedback[0]:
            rev = topo.reverse_tag(dst_tor, self.id, pkt.feedback[0])
            path = topo.paths(self.id, dst_tor)[rev - 1]
        else:
            return False
        route = pkt.route = path.nodes
        pkt.hop = 1
        port = self.ports[route[1]]
        if net.track_ce:
            occ = port.occupancy
            if occ > pkt.ce_max:
                pkt.ce_max = occ
        port.enqueue(pkt)
        return True

    # -- per-hop schemes ----------------------------------------------------------------
    def _ecmp(self, pkt: Packet, cands: list) -> OutputQueue:
        key = pkt.fkey
        port = self.ecmp_cache.get(key)
        if port is None:
            port = self.ecmp_cache[key] = cands[mix64(key, self.salt) % len(cands)]
        return port

    def _per_hop(self, pkt: Packet, cands: list, dst_tor: int) -> OutputQueue:
        net = self.net
        mode = net.per_hop
        if mode == "letflow":
            key = pkt.fkey ^ dst_tor
            return letflow_select(key, self.sim.now, self.flowlets,
                                  net.scheme.flowlet_gap, cands, net.letflow_rng)
        if mode == "drill":
            mem = self.drill.get(dst_tor)
            if mem is None:
                mem = self.drill[dst_tor] = DrillMemory()
            now = self.sim.now
            occ = [p.qbytes + p.tx_size if now < p.busy_until else p.qbytes
                   for p in cands]
            return cands[drill_select(occ, net.scheme.drill_d, mem, net.drill_rng)]
        return self._ecmp(pkt, cands)


class Network:
    """All nodes of one run plus per-run collectors."""

    def __init__(self, sim: Simulator, topology: Topology, scheme: SchemeParams,
                 transport: TransportParams | None = None, ecn: EcnConfig | None = None,
                 pfc: PfcConfig | None = None):
        self.sim = sim
        self.topology = topology
        self.scheme = scheme
        self.transport = transport or TransportParams()
        self.ecn = ecn
        self.pfc = pfc if pfc is not None and pfc.enabled else None
        self.header_bytes = self.transport.header_bytes
        self.host_tor = topology.host_tor
        self.seqbalance = scheme.name == "seqbalance"
        self.path_scheme = scheme.name in PATH_SCHEMES
        self.track_ce = scheme.name == "conga_lite"
        self.per_hop = scheme.name if scheme.name in ("letflow", "drill") else "ecmp"
        self.letflow_rng = sim.rng(Stream.LETFLOW)
        self.drill_rng = sim.rng(Stream.DRILL)
        self.mark_rng = sim.rng(Stream.MARKING)
        self.hash_salt = mix64(scheme.salt, sim.rng(Stream.ECMP_SALT).getrandbits(64))
        self._qp_ids = itertools.count(1)
        self._wqe_ids = itertools.count(1)
        self.hold: tuple[int, int, int] | None = None
        self.hold_applied = False
        self.trace: list | None = None
        self.trace_qps: set[int] = set()
        self.messages: dict[int, MessageState] = {}
        self.records: list[FlowRecord] = []
        self.cqe_listeners: list = []
        self.pin_log: list = []
        self.imbalance: list[ImbalanceSample] = []
        self.hosts: dict[int, Host] = {}
        self.switches: dict[int, Switch] = {}
        self._build()

    def _wire_size(self, payload: int) -> int:
        return payload + self.header_bytes

    def _build(self) -> None:
        topo = self.topology
        for node in topo.nodes:
            if node.role is Role.HOST:
                self.hosts[node.index] = Host(self, node.index, topo.host_tor[node.index])
            else:
                self.switches[node.index] = Switch(self, node.index, node.role)
        nodes = {**self.hosts, **self.switches}
        max_pkt = self.transport.mtu + self.header_bytes
        for (u, v), spec in sorted(topo.links.items()):
            src = nodes[u]
            is_host = u in self.hosts
            cls = HostPort if is_host else OutputQueue
            port = cls(self.sim, f"{u}->{v}", src, nodes[v], spec.capacity,
                       spec.propagation_delay, spec.egress_queue_capacity,
                       None if is_host else self.ecn, self.mark_rng, self.pfc)
            if self.pfc is not None:
                bdp = -(-2 * spec.propagation_delay * spec.capacity // 8_000_000_000)
                port.headroom = bdp + 3 * max_pkt
            if is_host:
                src.port = port
            else:
                src.ports[v] = port
        self._compute_next_hops()

    def _compute_next_hops(self) -> None:
        topo = self.topology
        sw = self.switches
        adj = {s: [v for v in topo.neighbors(s) if v in sw] for s in sw}
        for t in topo.tors:
            dist = {t: 0}
            q = deque([t])
            while q:
                u = q.popleft()
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        q.append(v)
            for s, node in sw.items():
                if s == t or s not in dist:
                    continue
                node.next_hops[t] = [node.ports[v] for v in adj[s]
                                     if dist.get(v, -1) == dist[s] - 1]
        for node in sw.values():
            if node.is_tor:
                node.uplinks = [node.ports[v] for v in topo.up_neighbors(node.id)]

    # -- workload entry points --------------------------------------------------------
    def submit(self, src: int, dst: int, size: int, tag=None) -> WorkQueueElement:
        if src == dst:
            raise SimulationError("flow source equals destination")
        now = self.sim.now
        wqe = WorkQueueElement(next(self._wqe_ids), size, src, dst, now)
        host = self.hosts[src]
        subs = shaper_split(wqe, self.scheme.n, self.transport.mtu)
        qps = host.qps_to(dst, len(subs))
        msg = MessageState(wqe, AckBitmap(wqe.wqe_id, len(subs)), subs)
        msg.tag = tag
        self.messages[wqe.wqe_id] = msg
        for sub, qp in zip(subs, qps):
            host.post(qp, sub)
        return wqe

    def _subwqe_done(self, sub, retx_bytes: int, now: int) -> None:
        msg = self.messages[sub.parent]
        msg.retx_bytes += retx_bytes
        msg.last_ack_time = now
        cqe = on_subwqe_complete(msg.bitmap, sub.index, now)
        if cqe is None:
            return
        del self.messages[sub.parent]
        w = msg.wqe
        rec = FlowRecord(w.wqe_id, w.src_host, w.dst_host, w.size, w.submit_time,
                         cqe.complete_time, msg.retx_bytes, self.scheme.name,
                         msg.bitmap.n)
        self.records.append(rec)
        for fn in self.cqe_listeners:
            fn(msg, rec)

    # -- sampling ------------------------------------------------------------------------
    def start_imbalance_sampling(self, window: int, until: int) -> None:
        tors = [self.switches[t] for t in self.topology.tors]
        last = {t.id: [p.tx_bytes for p in t.uplinks] for t in tors}

        def sample(start):
            for t in tors:
                cur = [p.tx_bytes for p in t.uplinks]
                prev = last[t.id]
                self.imbalance.append(ImbalanceSample(
                    t.id, start, [c - p for c, p in zip(cur, prev)]))
                last[t.id] = cur
            nxt = start + window
            if nxt + window <= until:
                self.sim.call_at(nxt + window, EventKind.METRIC_SAMPLE, sample, nxt)

        if window <= until:
            self.sim.call_at(self.sim.now + window, EventKind.METRIC_SAMPLE, sample,
                             self.sim.now)

    # -- counters ----------------------------------------------------------------------
    def all_ports(self):
        for h in self.hosts.values():
            yield h.port
        for s in self.switches.values():
            yield from s.ports.values()

    def all_qps(self):
        for h in self.hosts.values():
            for lst in h.qps.values():
                yield from lst

    @property
    def drops(self) -> int:
        return (sum(p.drops for p in self.all_ports())
                + sum(s.ingress_drops for s in self.switches.values()))

    @property
    def reorder_retx_packets(self) -> int:
        """Packets resent because of a NAK (sequence gap at the responder)."""
        return sum(q.nak_retx_packets for q in self.all_qps())

    @property
    def timeout_retx_packets(self) -> int:
        return sum(q.timeout_retx_packets for q in self.all_qps())

    @property
    def congestion_bytes(self) -> int:
        return sum(s.congestion_rx_bytes for s in self.switches.values())

    @property
    def data_bytes(self) -> int:
        return sum(h.data_tx_bytes for h in self.hosts.values())

    @property
    def delivered_bytes(self) -> int:
        return sum(q.receiver.delivered_bytes for q in self.all_qps())

    def counters(self) -> dict:
        sw = self.switches.values()
        return {
            "drops": self.drops,
            "reorder_retx_packets": self.reorder_retx_packets,
            "timeout_retx_packets": self.timeout_retx_packets,
            "naks": sum(q.naks for q in self.all_qps()),
            "ecn_marks": sum(p.marks for p in self.all_ports()),
            "pause_frames": sum(p.pause_frames for p in self.all_ports()),
            "congestion_packets": sum(s.congestion_rx for s in sw),
            "congestion_bytes": self.congestion_bytes,
            "data_bytes": self.data_bytes,
            "delivered_bytes": self.delivered_bytes,
            "cnps": sum(h.cnps_sent for h in self.hosts.values()),
            "selections": sum(s.selections for s in sw),
            "fallbacks": sum(s.fallbacks for s in sw),
            "inactive_assignments": sum(s.inactive_hits for s in sw),
            "completed_flows": len(self.records),
            "open_flows": len(self.messages),
        }
