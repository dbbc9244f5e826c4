"""Ready-to-run scenario presets at desk scale."""

from __future__ import annotations

import copy

from .config import ConfigError, effective_config


def _link(gbps, delay_ns=1000, queue_bytes=2_000_000):
    return {"gbps": gbps, "delay_ns": delay_ns, "queue_bytes": queue_bytes}


# ECN thresholds scaled with link speed so that k_min drains in 32us
_ECN_10G = {"k_min": 40_000, "k_max": 130_000, "p_max": 0.2}
_ECN_40G = {"k_min": 160_000, "k_max": 520_000, "p_max": 0.2}
_ECN_100G = {"k_min": 400_000, "k_max": 1_600_000, "p_max": 0.2}

_TESTBED = {
    "kind": "leaf_spine", "leaves": 2, "spines": 4, "hosts_per_leaf": 3,
    "host_link": _link(40), "fabric_link": _link(40),
}

_SIM_2TIER = {
    "kind": "leaf_spine", "leaves": 4, "spines": 4, "hosts_per_leaf": 4,
    "host_link": _link(10, 1000, 1_000_000), "fabric_link": _link(10, 1000, 1_000_000),
}

_ELEPHANTS = {
    "kind": "poisson", "fixed_size": 262_144, "pairing": "permutation", "load": 0.7,
    "stop_ns": 30_000_000,
}

PRESETS: dict[str, dict] = {
    "ooo-penalty": {
        "description": "one mid-message packet held back on an idle 10G link; "
                       "FCT with and without the hold for 64KB and 1MB messages",
        "horizon_ns": 50_000_000,
        "topology": {"kind": "leaf_spine", "leaves": 1, "spines": 1, "hosts_per_leaf": 2,
                     "host_link": _link(10), "fabric_link": _link(10)},
        "scheme": {"name": "ecmp"},
        "ecn": _ECN_10G,
        "workload": {"kind": "delayed_packet", "sizes": [65_536, 1_048_576],
                     "extra_delay_ns": 20_000},
    },
    "flowlet-census": {
        "description": "flowlet sizes of a DCQCN-paced 1GB flow sharing a 100G "
                       "receiver link with on-off background traffic",
        "horizon_ns": 200_000_000,
        "topology": {"kind": "leaf_spine", "leaves": 1, "spines": 1, "hosts_per_leaf": 3,
                     "host_link": _link(100, 1000, 4_000_000),
                     "fabric_link": _link(100, 1000, 4_000_000)},
        "transport": {"ack_every": 16},
        "ecn": _ECN_40G,
        "workload": {"kind": "flowlet_census", "flow_size": 1_000_000_000,
                     "thresholds_ns": [10_000, 100_000], "background_load": 0.3,
                     "background_size": 1_000_000},
    },
    "n-sweep": {
        "description": "SeqBalance with N in {2, 4, 6} on the congested 2-tier preset",
        "seeds": list(range(1, 11)),
        "horizon_ns": 40_000_000,
        "topology": _SIM_2TIER,
        "scheme": {"name": "seqbalance"},
        "ecn": _ECN_10G,
        "workload": _ELEPHANTS,
        "sweep": {"scheme.n": [2, 4, 6]},
    },
    "symmetric-3srv": {
        "description": "three 40G senders join one by one across 2 leaves and 4 spines",
        "seeds": [1, 2, 3, 4, 5, 6],
        "horizon_ns": 6_000_000,
        "topology": _TESTBED,
        "ecn": _ECN_40G,
        "workload": {"kind": "closed_loop", "pairs": [[0, 3], [1, 4], [2, 5]],
                     "size": 2_000_000, "depth": 8, "phase_ns": 2_000_000},
        "dcqcn": {"clamp_target": False},
        "metrics": {"warmup_ns": 500_000},
        "sweep": {"scheme.name": ["ecmp", "seqbalance"]},
    },
    "asymmetric-3srv": {
        "description": "as symmetric-3srv with one spine removed and one spine's "
                       "uplinks doubled to 80G",
        "seeds": [1, 2, 3, 4, 5, 6],
        "horizon_ns": 6_000_000,
        "topology": {**_TESTBED,
                     "asymmetry": {"failed_spine": 3, "boost": [[0, 0], [1, 0]],
                                   "factor": 2.0}},
        "ecn": _ECN_40G,
        "workload": {"kind": "closed_loop", "pairs": [[0, 3], [1, 4], [2, 5]],
                     "size": 2_000_000, "depth": 8, "phase_ns": 2_000_000},
        "dcqcn": {"clamp_target": False},
        "metrics": {"warmup_ns": 500_000},
        "sweep": {"scheme.name": ["ecmp", "seqbalance"]},
    },
    "sim-2tier": {
        "description": "4 leaves x 4 spines x 4 hosts at 10G, permutation elephants "
                       "(low entropy) at 70% load, ECMP vs SeqBalance",
        "seeds": list(range(1, 11)),
        "horizon_ns": 40_000_000,
        "topology": _SIM_2TIER,
        "ecn": _ECN_10G,
        "workload": _ELEPHANTS,
        "sweep": {"scheme.name": ["ecmp", "seqbalance"]},
    },
    "sim-3tier": {
        "description": "small fat-tree (2 pods, 40G ToR-Agg, 10G elsewhere) under "
                       "scaled websearch traffic, all five schemes",
        "seeds": [1, 2],
        "horizon_ns": 20_000_000,
        "topology": {"kind": "fat_tree", "cores": 4, "aggs": 4, "tors": 4,
                     "hosts_per_tor": 4,
                     "host_link": _link(10, 1000, 1_000_000),
                     "tor_agg_link": _link(40, 1000, 2_000_000),
                     "agg_core_link": _link(10, 1000, 1_000_000)},
        "ecn": _ECN_10G,
        "workload": {"kind": "poisson", "cdf": "websearch", "size_scale": 0.1,
                     "load": 0.6, "pairing": "random", "stop_ns": 15_000_000},
        "sweep": {"scheme.name": ["ecmp", "letflow", "conga_lite", "drill",
                                  "seqbalance"]},
    },
    "overhead": {
        "description": "CONGESTION packet bandwidth with one and two 40G senders "
                       "(25% and 50% of the ToR uplink capacity) on the symmetric "
                       "testbed fabric",
        "seeds": [1, 2, 3],
        "horizon_ns": 6_000_000,
        "topology": _TESTBED,
        "scheme": {"name": "seqbalance"},
        "ecn": _ECN_40G,
        "dcqcn": {"clamp_target": False},
        "workload": {"kind": "closed_loop", "pairs": [[0, 3], [1, 4], [2, 5]],
                     "size": 2_000_000, "depth": 8, "phase_ns": 0},
        "sweep": {"workload.active_pairs": [1, 2]},
    },
}


def list_presets() -> list[str]:
    return list(PRESETS)


def preset(name: str) -> dict:
    """Effective (defaults-applied) config of a preset."""
    try:
        raw = copy.deepcopy(PRESETS[name])
    except KeyError:
        raise ConfigError(
            f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None
    raw["name"] = name
    return effective_config(raw)
