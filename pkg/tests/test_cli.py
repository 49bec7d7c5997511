"""Configuration, caching and CLI orchestration tests."""

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from ringmux import cache as rc
from ringmux import cli
from ringmux import config as rcfg
from ringmux import dynamics as dyn
from ringmux import tables as tb


MINI = {
    "device": {
        "ring_length_m": 100e-6, "nu_sq": 0.95, "nu_aux_sq": 0.9,
        "n_eff_real": 2.5, "n_eff_imag": 1e-7, "group_index": 4.0,
        "wavelength_m": 1550e-9,
    },
    "dynamics": {
        "q_intrinsic": 200e6, "q_idler": 6667, "q_pump": 6667,
        "detuning_over_kappa_pump": 20.0, "pump_width_s": 1e-12,
        "phase_response_time_s": 3e-12, "decision_lag_s": 12e-12,
        "fock_cutoff": 6,
    },
    "protocol": {
        "detection_efficiency": 0.996, "fidelity_threshold": 0.985,
        "g2_threshold": 1.0, "release_cap": 3, "max_bins": 2,
        "pump_grid": [0.05, 0.2],
        "tau_bin_over_idler_lifetime": [12.0],
    },
    "run": {
        "n_trajectories": 800, "master_seed": 99,
        "output_dir": "out", "cache_dir": "cache", "jobs": 1,
    },
}


@pytest.fixture()
def mini_config(tmp_path):
    raw = json.loads(json.dumps(MINI))
    raw["run"]["output_dir"] = str(tmp_path / "out")
    raw["run"]["cache_dir"] = str(tmp_path / "cache")
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


# --------------------------------------------------------------------- #
# configuration


def test_empty_config_lists_every_missing_section(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    with pytest.raises(rcfg.ConfigError) as err:
        rcfg.load_config(path)
    msg = str(err.value)
    for section in ("device", "dynamics", "protocol", "run"):
        assert f"{section}: missing section" in msg


def test_validation_collects_multiple_problems(tmp_path):
    raw = json.loads(json.dumps(MINI))
    raw["device"]["nu_sq"] = 1.7
    raw["protocol"]["detection_efficiency"] = 2.0
    raw["dynamics"]["fock_cutoff"] = 1
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(rcfg.ConfigError) as err:
        rcfg.load_config(path)
    msg = str(err.value)
    assert "device.nu_sq" in msg
    assert "protocol.detection_efficiency" in msg
    assert "dynamics.fock_cutoff" in msg


def test_unknown_field_reported(tmp_path):
    raw = json.loads(json.dumps(MINI))
    raw["device"]["bogus_knob"] = 1.0
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump(raw))
    with pytest.raises(rcfg.ConfigError) as err:
        rcfg.load_config(path)
    assert "device.bogus_knob" in str(err.value)


def test_quality_factor_conversion(mini_config):
    cfg = rcfg.load_config(mini_config)
    g = cfg.geometry()
    params = cfg.dynamics_params()
    assert params.kappa_i == pytest.approx(g.omega_pump / (2 * 6667))
    assert params.kappa_loss == pytest.approx(g.omega_pump / (2 * 200e6))
    assert params.delta_s == pytest.approx(20 * params.kappa_p)
    assert params.delta_i == pytest.approx(-20 * params.kappa_p)
    lifetime = 1.0 / (2 * params.kappa_i)
    assert cfg.tau_bins()[0] == pytest.approx(12.0 * lifetime)


# --------------------------------------------------------------------- #
# cache


def small_table() -> tb.BinOutcomeTable:
    params = dyn.DynamicsParams(kappa_i=30.0, kappa_p=30.0, kappa_loss=0.02,
                                pump_width=0.02, cutoff=6)
    return tb.build_bin_table(0.05, 0, 300, params, 1.0, seed=5)


def test_table_cache_round_trip(tmp_path):
    cache = rc.TableCache(tmp_path)
    table = small_table()
    cache.save("k1", table)
    loaded = cache.load("k1")
    assert np.array_equal(loaded.counts, table.counts)
    assert loaded.pump_scale == table.pump_scale
    assert loaded.tau_bin == table.tau_bin


def test_table_cache_detects_tampering(tmp_path):
    cache = rc.TableCache(tmp_path)
    table = small_table()
    path = cache.save("k2", table)
    with np.load(path) as data:
        counts = data["counts"].copy()
        meta = str(data["meta"])
        checksum = str(data["checksum"])
    counts[0, 0, 0] += 1
    np.savez_compressed(path, counts=counts, meta=meta, checksum=checksum)
    with pytest.raises(rc.CacheError):
        cache.load("k2")


def test_cache_miss_raises(tmp_path):
    with pytest.raises(rc.CacheError):
        rc.TableCache(tmp_path).load("missing")


def test_json_cache_round_trip_and_key_check(tmp_path):
    cache = rc.JsonCache(tmp_path)
    cache.save("kx", {"a": 1.5})
    assert cache.load("kx") == {"a": 1.5}
    path = cache.path_for("kx")
    body = json.loads(path.read_text())
    body["key"] = "other"
    path.write_text(json.dumps(body))
    with pytest.raises(rc.CacheError):
        cache.load("kx")


def test_seed_for_is_deterministic():
    a = rc.seed_for(7, "table-abc", 0)
    b = rc.seed_for(7, "table-abc", 0)
    c = rc.seed_for(7, "table-abd", 0)
    assert a.entropy == b.entropy and a.spawn_key == b.spawn_key
    assert a.spawn_key != c.spawn_key
    ga = np.random.default_rng(a).random(4)
    gb = np.random.default_rng(b).random(4)
    assert np.array_equal(ga, gb)


def test_content_key_stable_under_ordering():
    k1 = rc.content_key({"b": 2, "a": 1})
    k2 = rc.content_key({"a": 1, "b": 2})
    assert k1 == k2


# --------------------------------------------------------------------- #
# CLI subcommands


def run_cli(mini_config, *argv) -> int:
    return cli.main(["--config", str(mini_config), *argv])


def test_spectra_outputs_and_determinism(mini_config, tmp_path):
    assert run_cli(mini_config, "spectra") == 0
    out = Path(yaml.safe_load(mini_config.read_text())["run"]["output_dir"])
    first = {p.name: p.read_bytes() for p in out.glob("*.csv")}
    assert {"spectrum.csv", "aux_spectrum.csv", "tuning.csv"} <= set(first)
    for name, blob in first.items():
        header = blob.splitlines()[0].decode()
        assert "," in header and header[0].isalpha()
    assert run_cli(mini_config, "spectra") == 0
    second = {p.name: p.read_bytes() for p in out.glob("*.csv")}
    assert first == second


def test_manifest_written(mini_config):
    assert run_cli(mini_config, "spectra") == 0
    out = Path(yaml.safe_load(mini_config.read_text())["run"]["output_dir"])
    manifest = json.loads((out / "spectra-manifest.json").read_text())
    assert manifest["subcommand"] == "spectra"
    assert manifest["seed"] == 99
    assert "spectrum" in manifest["artifacts"]


def test_optimize_without_tables_is_cache_error(mini_config):
    assert run_cli(mini_config, "optimize") == cli.EXIT_CACHE


def test_invalid_config_exit_code(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("device: {nu_sq: 5.0}\n")
    assert cli.main(["--config", str(path), "spectra"]) == cli.EXIT_CONFIG


def test_pump_table_then_optimize_deterministic(mini_config):
    assert run_cli(mini_config, "pump-table") == 0
    out = Path(yaml.safe_load(mini_config.read_text())["run"]["output_dir"])
    tables_first = (out / "tables.csv").read_bytes()
    assert run_cli(mini_config, "optimize") == 0
    optimize_first = (out / "optimize.csv").read_bytes()
    policy_first = (out / "policy.json").read_bytes()
    # rerun everything with the same seed: byte-identical artifacts
    assert run_cli(mini_config, "pump-table") == 0
    assert (out / "tables.csv").read_bytes() == tables_first
    assert run_cli(mini_config, "optimize") == 0
    assert (out / "optimize.csv").read_bytes() == optimize_first
    assert (out / "policy.json").read_bytes() == policy_first
    data = np.genfromtxt(out / "optimize.csv", delimiter=",", names=True)
    assert data["success"].ndim in (0, 1)


def test_figures_spectra_bundle(mini_config):
    assert run_cli(mini_config, "figures", "--figure", "3") == 0
    out = Path(yaml.safe_load(mini_config.read_text())["run"]["output_dir"])
    assert (out / "fig3" / "spectrum.csv").exists()
    assert (out / "fig3" / "tuning.csv").exists()


def test_cache_dir_env_override(mini_config, tmp_path, monkeypatch):
    alt = tmp_path / "altcache"
    monkeypatch.setenv(cli.CACHE_ENV, str(alt))
    assert run_cli(mini_config, "pump-table") == 0
    assert any(alt.glob("table-*.npz"))
