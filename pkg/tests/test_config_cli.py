import filecmp

import pytest
import yaml

from seqbalance_sim import cli
from seqbalance_sim.config import (DEFAULTS, apply_overrides, dump_config,
                                   effective_config, load_config, parse_override,
                                   phi_from_ecn, resolved_phi, scheme_params,
                                   sweep_variants)
from seqbalance_sim.engine import SimulationError
from seqbalance_sim.presets import PRESETS, list_presets, preset
from seqbalance_sim.runner import run_experiment
from seqbalance_sim.topology import ConfigError

from conftest import small_config

EXPECTED_PRESETS = ["ooo-penalty", "flowlet-census", "n-sweep", "symmetric-3srv",
                    "asymmetric-3srv", "sim-2tier", "sim-3tier", "overhead"]


def test_phi_examples():
    assert phi_from_ecn(160_000, 40e9) == 32_000
    assert phi_from_ecn(400_000, 100e9) == 32_000
    with pytest.raises(ConfigError):
        phi_from_ecn(0, 40e9)


def test_phi_defaults_from_ecn_and_host_rate():
    cfg = effective_config({"topology": {"host_link": {"gbps": 40}}})
    assert resolved_phi(cfg) == 32_000
    cfg = apply_overrides(cfg, [("scheme.phi_ns", 5_000)])
    assert resolved_phi(cfg) == 5_000


def test_preset_inventory():
    assert list_presets() == EXPECTED_PRESETS
    for name in EXPECTED_PRESETS:
        cfg = preset(name)
        assert cfg["name"] == name
        assert sweep_variants(cfg)
    with pytest.raises(ConfigError):
        preset("nope")


def test_seqbalance_defaults_to_four_subflows():
    assert scheme_params(effective_config({"scheme": {"name": "seqbalance"}})).n == 4
    assert scheme_params(effective_config({"scheme": {"name": "ecmp"}})).n == 1


@pytest.mark.parametrize("raw", [
    {"bogus": 1},
    {"topology": {"leaves": 0}},
    {"topology": {"kind": "ring"}},
    {"scheme": {"name": "presto"}},
    {"workload": {"load": 0}},
    {"ecn": {"k_min": 0}},
    {"seeds": []},
    {"workload": {"kind": "closed_loop"}},
    {"topology": "flat"},
])
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        effective_config(raw)


def test_overrides_and_sweeps():
    assert parse_override("scheme.n=6") == ("scheme.n", 6)
    assert parse_override("seeds=[1, 2]") == ("seeds", [1, 2])
    with pytest.raises(ConfigError):
        parse_override("scheme.n")
    cfg = apply_overrides(effective_config({}), [("sweep", {"scheme.n": [2, 4],
                                                            "workload.load": [0.3]})])
    labels = [label for label, _ in sweep_variants(cfg)]
    assert labels == ["scheme.n=2,workload.load=0.3", "scheme.n=4,workload.load=0.3"]
    with pytest.raises(ConfigError):
        apply_overrides(cfg, [("scheme.nn", 1)])


def test_dump_and_reload_round_trip(tmp_path):
    cfg = preset("sim-2tier")
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert set(yaml.safe_load(dump_config(DEFAULTS))) == set(DEFAULTS)


def tiny(tmp_path, **kw):
    cfg = small_config(horizon_ns=1_500_000, workload={"load": 0.4, "stop_ns": 1_000_000},
                       **kw)
    p = tmp_path / "tiny.yaml"
    p.write_text(dump_config(cfg))
    return cfg, p


def test_rerun_and_reloaded_config_give_identical_csvs(tmp_path):
    cfg, path = tiny(tmp_path, scheme={"name": "seqbalance"})
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    run_experiment(load_config(tmp_path / "a" / "effective_config.yaml"), tmp_path / "c")
    for name in ("flows.csv", "imbalance.csv", "summary.csv"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "c" / name, shallow=False)


def test_cli_commands(tmp_path, capsys):
    _, path = tiny(tmp_path)
    assert cli.main(["list-presets"]) == 0
    assert capsys.readouterr().out.split() == EXPECTED_PRESETS
    assert cli.main(["validate", str(path)]) == 0
    out = tmp_path / "out"
    assert cli.main(["run", str(path), "--out", str(out), "-o", "scheme.name=drill"]) == 0
    assert "drill" in (out / "effective_config.yaml").read_text()
    for f in ("flows.csv", "summary.csv", "imbalance.csv", "meta.yaml", "plot/summary.dat"):
        assert (out / f).exists()


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("topology: {leaves: -1}\n")
    assert cli.main(["validate", str(bad)]) == 1
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 1
    _, path = tiny(tmp_path)
    assert cli.main(["run", str(path), "-o", "scheme.what=1"]) == 1

    def boom(*a, **k):
        raise SimulationError("broken invariant")

    monkeypatch.setattr(cli, "run_experiment", boom)
    assert cli.main(["run", str(path)]) == 2
    assert "broken invariant" in capsys.readouterr().err


def test_output_dir_from_environment(tmp_path, monkeypatch):
    cfg, _ = tiny(tmp_path)
    monkeypatch.setenv("SEQBALANCE_OUT", str(tmp_path / "env"))
    _, out = run_experiment(cfg)
    assert out == tmp_path / "env" / cfg["name"]
    assert (out / "summary.csv").exists()


def test_ooo_preset_writes_two_sizes(tmp_path):
    results, out = run_experiment(preset("ooo-penalty"), tmp_path)
    rows = (out / "table1.csv").read_text().splitlines()
    assert rows[0].startswith("size_bytes")
    assert [r.split(",")[0] for r in rows[1:]] == ["65536", "1048576"]


def test_n_sweep_reports_each_n(tmp_path):
    cfg = apply_overrides(preset("n-sweep"), [("seeds", [1]), ("horizon_ns", 2_000_000),
                                              ("workload.stop_ns", 1_500_000)])
    results, out = run_experiment(cfg, tmp_path)
    rows = [l.split(",") for l in (out / "summary.csv").read_text().splitlines()[1:]]
    pooled = [r for r in rows if r[1] == "all"]
    assert [r[0] for r in pooled] == ["scheme.n=2", "scheme.n=4", "scheme.n=6"]
    assert all(r[7] and r[8] for r in pooled)  # mean and p99 slowdown


def test_preset_registry_order():
    assert list(PRESETS) == EXPECTED_PRESETS
