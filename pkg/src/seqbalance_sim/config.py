"""Experiment configuration: YAML schema, defaults, overrides and builders."""

from __future__ import annotations

import copy
import itertools
import math
from pathlib import Path
from typing import Any

import yaml

from .congestion import DcqcnParams, EcnConfig, PfcConfig
from .network import SCHEMES, SchemeParams, TransportParams
from .topology import (ConfigError, LinkSpec, Role, Topology, apply_asymmetry,
                       build_fat_tree, build_leaf_spine)
from .transport import GbnParams

WORKLOAD_KINDS = ("poisson", "elephants", "closed_loop", "delayed_packet",
                  "flowlet_census")


def _link(gbps, delay_ns=1000, queue_bytes=2_000_000):
    return {"gbps": gbps, "delay_ns": delay_ns, "queue_bytes": queue_bytes}


DEFAULTS: dict[str, Any] = {
    "name": "custom",
    "description": "",
    "seeds": [1],
    "horizon_ns": 10_000_000,
    "jobs": 1,
    "topology": {
        "kind": "leaf_spine",
        "leaves": 4,
        "spines": 4,
        "hosts_per_leaf": 4,
        "cores": 4,
        "aggs": 4,
        "tors": 4,
        "hosts_per_tor": 4,
        "pods": None,
        "host_link": _link(10),
        "fabric_link": _link(10),
        "tor_agg_link": _link(10),
        "agg_core_link": _link(10),
        "asymmetry": {"failed_spine": None, "boost": [], "factor": 1.0},
    },
    "scheme": {
        "name": "ecmp",
        "n": None,  # 4 for seqbalance, 1 otherwise
        "phi_ns": None,  # derived from ecn.k_min and the host link rate
        "retries": 8,
        "dedup_ns": None,  # phi / 4
        "flowlet_gap_ns": 100_000,
        "drill_d": 2,
        "conga_half_life_ns": 100_000,
        "salt": 0,
    },
    "transport": {
        "mtu": 1024,
        "header_bytes": 0,
        "window_bytes": 0,
        "ack_every": 1,
        "nak_interval_ns": None,
        "restart_delay_ns": 56_500,
        "retx_rate_fraction": 0.22,
        "rto_ns": 4_000_000,
        "initial_psn": 0,
    },
    "dcqcn": {
        "enabled": True,
        "g": 1 / 16,
        "alpha_timer_ns": 55_000,
        "increase_timer_ns": 55_000,
        "fast_recovery_stages": 5,
        "rate_ai_bps": 40_000_000,
        "rate_hai_bps": 400_000_000,
        "min_rate_bps": 1_000_000,
        "cnp_interval_ns": 50_000,
        "clamp_target": True,
    },
    "ecn": {"enabled": True, "k_min": 160_000, "k_max": 520_000, "p_max": 0.2},
    "pfc": {"enabled": True, "pause_bytes": 512_000, "resume_bytes": 384_000},
    "workload": {
        "kind": "poisson",
        # poisson
        "cdf": "websearch",
        "fixed_size": None,
        "size_scale": 1.0,
        "load": 0.5,
        "pairing": "random",
        "start_ns": 0,
        "stop_ns": None,  # arrivals stop here; defaults to the horizon
        # elephants / closed_loop
        "size": 2_000_000,
        "pairs": [],  # closed_loop: [[src_host, dst_host], ...] as host ordinals
        "phase_ns": 1_000_000,  # closed_loop: pair i starts at i * phase_ns
        "active_pairs": None,  # closed_loop: use only the first k pairs
        "depth": 1,
        # delayed_packet
        "sizes": [65_536, 1_048_576],
        "extra_delay_ns": 20_000,
        "delayed_index": None,
        # flowlet_census
        "flow_size": 1_000_000_000,
        "thresholds_ns": [10_000, 100_000],
        "background_load": 0.3,
        "background_size": 1_000_000,
    },
    "metrics": {
        "imbalance_window_ns": 100_000,
        "warmup_ns": 0,
        "base_rtt_ns": None,  # per host pair unloaded RTT when unset
    },
    "sweep": {},
    "output": {"dir": None},
}

_OPEN_KEYS = {("sweep",)}


def deep_merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        here = path + (k,)
        if k not in base and path not in _OPEN_KEYS and here[:1] not in _OPEN_KEYS:
            raise ConfigError(f"unknown config key {'.'.join(here)}")
        if isinstance(base.get(k), dict) and k != "sweep" and not isinstance(v, dict):
            raise ConfigError(f"config key {'.'.join(here)} must be a section")
        if isinstance(v, dict) and isinstance(base.get(k), dict) and k != "sweep":
            out[k] = deep_merge(base[k], v, here)
        else:
            out[k] = copy.deepcopy(v)
    return out


def effective_config(raw: dict | None) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    cfg = deep_merge(DEFAULTS, raw)
    validate(cfg)
    return cfg


def load_config(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    return effective_config(raw)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=None)


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, _, value = text.partition("=")
    try:
        return key.strip(), yaml.safe_load(value)
    except yaml.YAMLError as e:
        raise ConfigError(f"bad override value {value!r}: {e}") from None


def set_dotted(cfg: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key}")
        node = node[p]
    if parts[-1] not in node and parts[0] != "sweep":
        raise ConfigError(f"unknown config key {key}")
    node[parts[-1]] = value


def apply_overrides(cfg: dict, overrides: list[tuple[str, Any]]) -> dict:
    cfg = copy.deepcopy(cfg)
    for k, v in overrides:
        set_dotted(cfg, k, v)
    validate(cfg)
    return cfg


def sweep_variants(cfg: dict) -> list[tuple[str, dict]]:
    """Cartesian product over the ``sweep`` section, in key order."""
    sweep = cfg.get("sweep") or {}
    if not sweep:
        return [("base", cfg)]
    keys = list(sweep)
    out = []
    for values in itertools.product(*(sweep[k] for k in keys)):
        c = copy.deepcopy(cfg)
        c["sweep"] = {}
        for k, v in zip(keys, values):
            set_dotted(c, k, v)
        validate(c)
        label = ",".join(f"{k}={v}" for k, v in zip(keys, values))
        out.append((label, c))
    return out


# -- validation --------------------------------------------------------------

def _req(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def validate(cfg: dict) -> None:
    _req(isinstance(cfg["seeds"], list) and cfg["seeds"]
         and all(_is_int(s) and s >= 0 for s in cfg["seeds"]),
         "seeds must be a non-empty list of non-negative integers")
    _req(_is_int(cfg["horizon_ns"]) and cfg["horizon_ns"] > 0, "horizon_ns must be > 0")
    _req(_is_int(cfg["jobs"]) and cfg["jobs"] >= 1, "jobs must be >= 1")
    t = cfg["topology"]
    _req(t["kind"] in ("leaf_spine", "fat_tree"), f"unknown topology kind {t['kind']!r}")
    keys = (("leaves", "spines", "hosts_per_leaf") if t["kind"] == "leaf_spine"
            else ("cores", "aggs", "tors", "hosts_per_tor"))
    for k in keys:
        _req(_is_int(t[k]) and t[k] >= 1, f"topology.{k} must be an integer >= 1")
    for k in ("host_link", "fabric_link", "tor_agg_link", "agg_core_link"):
        link_spec(t[k], k)
    a = t["asymmetry"]
    _req(isinstance(a["boost"], list), "topology.asymmetry.boost must be a list")
    _req(isinstance(a["factor"], (int, float)) and a["factor"] > 0,
         "asymmetry factor must be > 0")
    s = cfg["scheme"]
    _req(s["name"] in SCHEMES, f"unknown scheme {s['name']!r}; expected one of {SCHEMES}")
    _req(s["n"] is None or (_is_int(s["n"]) and s["n"] >= 1), "scheme.n must be >= 1")
    _req(s["phi_ns"] is None or (_is_int(s["phi_ns"]) and s["phi_ns"] > 0),
         "scheme.phi_ns must be > 0")
    _req(_is_int(s["retries"]) and s["retries"] >= 1, "scheme.retries must be >= 1")
    _req(s["dedup_ns"] is None or (_is_int(s["dedup_ns"]) and s["dedup_ns"] >= 0),
         "scheme.dedup_ns must be >= 0")
    _req(_is_int(s["drill_d"]) and s["drill_d"] >= 1, "scheme.drill_d must be >= 1")
    tr = cfg["transport"]
    _req(_is_int(tr["mtu"]) and tr["mtu"] >= 256, "transport.mtu must be >= 256")
    _req(_is_int(tr["ack_every"]) and tr["ack_every"] >= 1, "transport.ack_every >= 1")
    _req(0 < tr["retx_rate_fraction"] <= 1, "transport.retx_rate_fraction in (0, 1]")
    e = cfg["ecn"]
    if e["enabled"]:
        ecn_config(cfg)
    p = cfg["pfc"]
    if p["enabled"]:
        pfc_config(cfg)
    d = cfg["dcqcn"]
    _req(0 < d["g"] <= 1, "dcqcn.g must be in (0, 1]")
    _req(d["min_rate_bps"] > 0, "dcqcn.min_rate_bps must be > 0")
    w = cfg["workload"]
    _req(w["kind"] in WORKLOAD_KINDS, f"unknown workload kind {w['kind']!r}")
    if w["kind"] == "poisson":
        _req(isinstance(w["load"], (int, float)) and 0 < w["load"] <= 1,
             "workload.load must be in (0, 1]")
        _req(w["pairing"] in ("random", "permutation", "incast"),
             f"unknown pairing {w['pairing']!r}")
        _req(w["fixed_size"] is not None or w["cdf"], "workload needs cdf or fixed_size")
        _req(w["size_scale"] > 0, "workload.size_scale must be > 0")
    if w["kind"] == "closed_loop":
        _req(bool(w["pairs"]), "closed_loop workload needs pairs")
        k = w["active_pairs"]
        _req(k is None or (_is_int(k) and 1 <= k <= len(w["pairs"])),
             "workload.active_pairs must be between 1 and len(pairs)")
        _req(_is_int(w["depth"]) and w["depth"] >= 1, "workload.depth must be >= 1")
    if w["kind"] == "delayed_packet":
        _req(bool(w["sizes"]) and all(_is_int(x) and x > 0 for x in w["sizes"]),
             "workload.sizes must be positive integers")
    if w["kind"] == "flowlet_census":
        _req(all(_is_int(x) and x >= 0 for x in w["thresholds_ns"]),
             "workload.thresholds_ns must be non-negative integers")
    m = cfg["metrics"]
    _req(_is_int(m["imbalance_window_ns"]) and m["imbalance_window_ns"] > 0,
         "metrics.imbalance_window_ns must be > 0")
    _req(isinstance(cfg["sweep"], dict), "sweep must be a mapping")
    for k, v in cfg["sweep"].items():
        _req(isinstance(v, list) and v, f"sweep.{k} must be a non-empty list")


# -- builders -------------------------------------------------------------------

def link_spec(d: dict, where: str = "link") -> LinkSpec:
    try:
        return LinkSpec(int(round(float(d["gbps"]) * 1e9)), int(d["delay_ns"]),
                        int(d["queue_bytes"]))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad {where}: {e}") from None


def phi_from_ecn(k_min: int, link_rate: float) -> int:
    """Time to drain ``k_min`` bytes at ``link_rate`` bps, rounded up to ns."""
    if k_min <= 0 or link_rate <= 0:
        raise ConfigError("phi needs a positive ECN threshold and link rate")
    return math.ceil(k_min * 8 * 1_000_000_000 / link_rate)


def build_topology(cfg: dict) -> Topology:
    t = cfg["topology"]
    if t["kind"] == "leaf_spine":
        topo = build_leaf_spine(t["leaves"], t["spines"], t["hosts_per_leaf"],
                                link_spec(t["host_link"]), link_spec(t["fabric_link"]))
        upper = topo.by_role(Role.SPINE)
    else:
        topo = build_fat_tree(t["cores"], t["aggs"], t["tors"], t["hosts_per_tor"],
                              link_spec(t["host_link"]), link_spec(t["tor_agg_link"]),
                              link_spec(t["agg_core_link"]), t["pods"])
        upper = topo.by_role(Role.CORE)
    a = t["asymmetry"]
    if a["failed_spine"] is None and not a["boost"]:
        return topo
    tors = topo.tors

    def pick(seq, i, what):
        if not _is_int(i) or not 0 <= i < len(seq):
            raise ConfigError(f"asymmetry {what} index {i} out of range")
        return seq[i]

    failed = None if a["failed_spine"] is None else pick(upper, a["failed_spine"], "spine")
    boosted = []
    for pair in a["boost"]:
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError("asymmetry.boost entries are [tor, spine] ordinals")
        boosted.append((pick(tors, pair[0], "tor"), pick(upper, pair[1], "spine")))
    return apply_asymmetry(topo, failed, boosted, float(a["factor"]))


def ecn_config(cfg: dict) -> EcnConfig | None:
    e = cfg["ecn"]
    if not e["enabled"]:
        return None
    return EcnConfig(int(e["k_min"]), int(e["k_max"]), float(e["p_max"]))


def pfc_config(cfg: dict) -> PfcConfig:
    p = cfg["pfc"]
    return PfcConfig(int(p["pause_bytes"]), int(p["resume_bytes"]), bool(p["enabled"]))


def resolved_phi(cfg: dict) -> int:
    s = cfg["scheme"]
    if s["phi_ns"] is not None:
        return int(s["phi_ns"])
    host_rate = float(cfg["topology"]["host_link"]["gbps"]) * 1e9
    return phi_from_ecn(int(cfg["ecn"]["k_min"]), host_rate)


def scheme_params(cfg: dict) -> SchemeParams:
    s = cfg["scheme"]
    n = s["n"] if s["n"] is not None else (4 if s["name"] == "seqbalance" else 1)
    return SchemeParams(s["name"], n, resolved_phi(cfg), s["retries"], s["dedup_ns"],
                        s["flowlet_gap_ns"], s["drill_d"], s["conga_half_life_ns"],
                        s["salt"])


def transport_params(cfg: dict) -> TransportParams:
    tr = cfg["transport"]
    d = cfg["dcqcn"]
    dcqcn = DcqcnParams(d["g"], d["alpha_timer_ns"], d["increase_timer_ns"],
                        d["fast_recovery_stages"], d["rate_ai_bps"], d["rate_hai_bps"],
                        d["min_rate_bps"], d["cnp_interval_ns"], bool(d["clamp_target"]))
    gbn = GbnParams(tr["restart_delay_ns"], tr["retx_rate_fraction"], tr["rto_ns"],
                    tr["nak_interval_ns"], tr["ack_every"])
    return TransportParams(tr["mtu"], tr["header_bytes"], tr["window_bytes"],
                           bool(d["enabled"]), dcqcn, gbn, tr["initial_psn"])
