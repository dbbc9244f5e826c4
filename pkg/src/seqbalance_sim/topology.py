"""Leaf-spine and 3-tier fat-tree fabrics with per-ToR-pair path tags."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

MAX_PATH_TAG = 1023  # 10-bit field, 0 reserved for "untagged"


class ConfigError(ValueError):
    """Invalid experiment or topology configuration."""


class Role(enum.Enum):
    HOST = "host"
    TOR = "tor"
    SPINE = "spine"
    AGG = "agg"
    CORE = "core"


LEVEL = {Role.HOST: 0, Role.TOR: 1, Role.SPINE: 2, Role.AGG: 2, Role.CORE: 3}


@dataclass(frozen=True)
class NodeId:
    index: int
    role: Role

    def __str__(self) -> str:
        return f"{self.role.value}{self.index}"


@dataclass(frozen=True)
class LinkSpec:
    capacity: int  # bits per second
    propagation_delay: int  # ns
    egress_queue_capacity: int  # bytes

    def __post_init__(self):
        if self.capacity <= 0:
            raise ConfigError("link capacity must be positive")
        if self.propagation_delay < 0:
            raise ConfigError("propagation delay must be non-negative")
        if self.egress_queue_capacity < 2 * 9000:
            # two jumbo frames is the loosest reading of "two max-size packets"
            raise ConfigError("egress queue must hold at least two max-size packets")

    def scaled(self, factor: float) -> "LinkSpec":
        return replace(self, capacity=int(round(self.capacity * factor)))


@dataclass(frozen=True)
class Path:
    tag: int
    hops: tuple[tuple[int, int], ...]  # directed (node index, node index) links

    @cached_property
    def nodes(self) -> tuple[int, ...]:
        return (self.hops[0][0],) + tuple(v for _, v in self.hops)


@dataclass
class Topology:
    kind: str
    nodes: list[NodeId]
    links: dict[tuple[int, int], LinkSpec]
    host_tor: dict[int, int]
    pods: dict[int, int] = field(default_factory=dict)  # switch index -> pod
    _path_cache: dict = field(default_factory=dict, repr=False, compare=False)

    # -- lookups ---------------------------------------------------------
    def by_role(self, role: Role) -> list[int]:
        return [n.index for n in self.nodes if n.role is role]

    @property
    def hosts(self) -> list[int]:
        return self.by_role(Role.HOST)

    @property
    def tors(self) -> list[int]:
        return self.by_role(Role.TOR)

    def role(self, index: int) -> Role:
        return self.nodes[index].role

    def neighbors(self, index: int) -> list[int]:
        adj = self._path_cache.get("adj")
        if adj is None:
            adj = {}
            for u, v in self.links:
                adj.setdefault(u, []).append(v)
            for vs in adj.values():
                vs.sort()
            self._path_cache["adj"] = adj
        return adj.get(index, [])

    def up_neighbors(self, index: int) -> list[int]:
        lvl = LEVEL[self.role(index)]
        return [v for v in self.neighbors(index) if LEVEL[self.role(v)] > lvl]

    def down_neighbors(self, index: int) -> list[int]:
        lvl = LEVEL[self.role(index)]
        return [v for v in self.neighbors(index) if LEVEL[self.role(v)] < lvl]

    def tor_hosts(self, tor: int) -> list[int]:
        return sorted(h for h, t in self.host_tor.items() if t == tor)

    def link(self, u: int, v: int) -> LinkSpec:
        return self.links[(u, v)]

    def host_link(self, host: int) -> LinkSpec:
        return self.links[(host, self.host_tor[host])]

    # -- paths -------------------------------------------------------------
    def paths(self, src_tor: int, dst_tor: int) -> list[Path]:
        key = (src_tor, dst_tor)
        cached = self._path_cache.get(key)
        if cached is None:
            cached = self._path_cache[key] = enumerate_paths(self, src_tor, dst_tor)
        return cached

    def reverse_tag(self, src_tor: int, dst_tor: int, tag: int) -> int:
        """Tag of the (dst_tor -> src_tor) path through the same switches."""
        key = ("rev", src_tor, dst_tor)
        table = self._path_cache.get(key)
        if table is None:
            back = {p.nodes[::-1]: p.tag for p in self.paths(dst_tor, src_tor)}
            table = {p.tag: back[p.nodes] for p in self.paths(src_tor, dst_tor)}
            self._path_cache[key] = table
        return table[tag]

    def unloaded_rtt(self, src_host: int, dst_host: int) -> int:
        """Round-trip propagation delay between two hosts on a minimal path."""
        a, b = self.host_tor[src_host], self.host_tor[dst_host]
        one_way = self.links[(src_host, a)].propagation_delay
        one_way += self.links[(b, dst_host)].propagation_delay
        if a != b:
            p = self.paths(a, b)[0]
            one_way += sum(self.links[h].propagation_delay for h in p.hops)
        return 2 * one_way


def _add_link(links, u, v, spec: LinkSpec):
    links[(u, v)] = spec
    links[(v, u)] = spec


def build_leaf_spine(num_leaves: int, num_spines: int, hosts_per_leaf: int,
                     host_link: LinkSpec, fabric_link: LinkSpec) -> Topology:
    if min(num_leaves, num_spines, hosts_per_leaf) < 1:
        raise ConfigError("leaf-spine counts must all be >= 1")
    nodes: list[NodeId] = []

    def add(role):
        nodes.append(NodeId(len(nodes), role))
        return len(nodes) - 1

    hosts = [add(Role.HOST) for _ in range(num_leaves * hosts_per_leaf)]
    leaves = [add(Role.TOR) for _ in range(num_leaves)]
    spines = [add(Role.SPINE) for _ in range(num_spines)]
    links: dict = {}
    host_tor = {}
    for i, h in enumerate(hosts):
        tor = leaves[i // hosts_per_leaf]
        host_tor[h] = tor
        _add_link(links, h, tor, host_link)
    for leaf in leaves:
        for spine in spines:
            _add_link(links, leaf, spine, fabric_link)
    return Topology("leaf_spine", nodes, links, host_tor)


def infer_pods(cores: int, aggs: int, tors: int) -> int:
    """Pods such that aggs-per-pod equals cores-per-agg (k-ary fat-tree shape).

    Falls back to a single pod when the counts do not form a square core
    layer; a single pod routes every ToR pair through the aggregation tier.
    """
    per_pod = math.isqrt(cores)
    if cores > 1 and per_pod * per_pod == cores and aggs % per_pod == 0:
        pods = aggs // per_pod
        if tors % pods == 0:
            return pods
    return 1


def build_fat_tree(cores: int, aggs: int, tors: int, hosts_per_tor: int,
                   host_link: LinkSpec, tor_agg_link: LinkSpec,
                   agg_core_link: LinkSpec, pods: int | None = None) -> Topology:
    if min(cores, aggs, tors) < 1 or hosts_per_tor < 1:
        raise ConfigError("fat-tree tier counts and hosts_per_tor must be >= 1")
    if pods is None:
        pods = infer_pods(cores, aggs, tors)
    if pods < 1 or aggs % pods or tors % pods:
        raise ConfigError(
            f"inconsistent pod wiring: {aggs} aggs / {tors} tors over {pods} pods")
    aggs_per_pod = aggs // pods
    tors_per_pod = tors // pods
    if pods > 1 and cores < aggs_per_pod:
        raise ConfigError("need at least one core per aggregation position")

    nodes: list[NodeId] = []

    def add(role):
        nodes.append(NodeId(len(nodes), role))
        return len(nodes) - 1

    host_ids = [add(Role.HOST) for _ in range(tors * hosts_per_tor)]
    tor_ids = [add(Role.TOR) for _ in range(tors)]
    agg_ids = [add(Role.AGG) for _ in range(aggs)]
    core_ids = [add(Role.CORE) for _ in range(cores)]
    links: dict = {}
    host_tor = {}
    pod_of = {}
    for i, h in enumerate(host_ids):
        tor = tor_ids[i // hosts_per_tor]
        host_tor[h] = tor
        _add_link(links, h, tor, host_link)
    for p in range(pods):
        pod_tors = tor_ids[p * tors_per_pod:(p + 1) * tors_per_pod]
        pod_aggs = agg_ids[p * aggs_per_pod:(p + 1) * aggs_per_pod]
        for t in pod_tors:
            pod_of[t] = p
            for a in pod_aggs:
                _add_link(links, t, a, tor_agg_link)
        for j, a in enumerate(pod_aggs):
            pod_of[a] = p
            # aggregation position j owns the core stripe {c : c % aggs_per_pod == j}
            stripe = [c for k, c in enumerate(core_ids) if k % aggs_per_pod == j]
            if not stripe:
                stripe = [core_ids[j % cores]]
            for c in stripe:
                _add_link(links, a, c, agg_core_link)
    return Topology("fat_tree", nodes, links, host_tor, pod_of)


def enumerate_paths(topology: Topology, src_tor: int, dst_tor: int) -> list[Path]:
    """All minimal up-down ToR-to-ToR paths, ordered by hop indices and tagged 1..n."""
    for t in (src_tor, dst_tor):
        if topology.role(t) is not Role.TOR:
            raise ConfigError(f"node {t} is not a ToR")
    if src_tor == dst_tor:
        return []

    # walk up tier by tier; stop at the first peak level that reaches dst_tor
    frontier = [(src_tor,)]
    found: list[tuple[int, ...]] = []
    while frontier and not found:
        nxt = []
        for up in frontier:
            for v in topology.up_neighbors(up[-1]):
                seq = up + (v,)
                nxt.append(seq)
                found.extend(seq + down for down in _down_walks(topology, v, dst_tor))
        frontier = nxt
    found.sort()
    if len(found) > MAX_PATH_TAG:
        raise ConfigError(
            f"{len(found)} paths between ToRs {src_tor} and {dst_tor} exceed "
            f"the {MAX_PATH_TAG}-tag space")
    return [Path(tag=i + 1, hops=tuple(zip(nodes, nodes[1:])))
            for i, nodes in enumerate(found)]


def _down_walks(topology: Topology, start: int, dst_tor: int):
    if start == dst_tor:
        yield ()
        return
    if LEVEL[topology.role(start)] <= LEVEL[Role.TOR]:
        return
    for v in topology.down_neighbors(start):
        if topology.role(v) is Role.HOST:
            continue
        for rest in _down_walks(topology, v, dst_tor):
            yield (v,) + rest


def apply_asymmetry(topology: Topology, failed_spine: int | None = None,
                    boosted_links: list[tuple[int, int]] | None = None,
                    factor: float = 1.0) -> Topology:
    """Remove one spine and speed up the given (undirected) links by ``factor``."""
    if factor <= 0:
        raise ConfigError("asymmetry factor must be > 0")
    links = dict(topology.links)
    if failed_spine is not None:
        role = topology.role(failed_spine)
        if role not in (Role.SPINE, Role.CORE, Role.AGG):
            raise ConfigError(f"node {failed_spine} is not a fabric switch")
        peers = [n for n in topology.by_role(role) if n != failed_spine]
        if not peers:
            raise ConfigError("cannot remove the only spine")
        links = {k: v for k, v in links.items() if failed_spine not in k}
    for u, v in boosted_links or []:
        if (u, v) not in links:
            raise ConfigError(f"no link {u}-{v} to boost")
        links[(u, v)] = links[(u, v)].scaled(factor)
        links[(v, u)] = links[(v, u)].scaled(factor)
    return Topology(topology.kind, list(topology.nodes), links,
                    dict(topology.host_tor), dict(topology.pods))
