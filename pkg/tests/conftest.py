import pytest

from seqbalance_sim.config import apply_overrides, effective_config
from seqbalance_sim.runner import _make_network


def small_config(**sections):
    """Effective config of a tiny 2x2x2 leaf-spine fabric plus overrides."""
    raw = {
        "horizon_ns": 2_000_000,
        "topology": {"kind": "leaf_spine", "leaves": 2, "spines": 2, "hosts_per_leaf": 2},
        "ecn": {"k_min": 40_000, "k_max": 130_000, "p_max": 0.2},
    }
    for k, v in sections.items():
        raw.setdefault(k, {})
        if isinstance(v, dict):
            raw[k].update(v)
        else:
            raw[k] = v
    return effective_config(raw)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture
def make_net():
    def make(cfg=None, seed=1, overrides=()):
        cfg = apply_overrides(cfg or small_config(), list(overrides))
        return _make_network(cfg, seed)
    return make
