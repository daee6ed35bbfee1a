"""Config validation, artifact determinism, CLI exit codes, report sanity."""
import importlib
import json
from pathlib import Path

import numpy as np
import pytest

from samlab.harness import cli
from samlab.harness import experiments as exp

# the package re-exports the verify() entry point under the submodule's
# name, so the module object itself comes from the import system
verify_mod = importlib.import_module("samlab.harness.verify")
from samlab.harness.config import (EXPERIMENT_TAGS, ConfigError,
                                   ExperimentConfig, config_from_mapping,
                                   load_config)
from samlab.harness.experiments import (DEFAULTS, build_landscape,
                                        build_metric, build_optimizer,
                                        default_config, iterate_scalar_grid,
                                        run_experiment, run_trajectory_suite)
from samlab.harness.runio import (format_cell, json_bytes, sha256_bytes,
                                  sha256_file, write_csv, write_json,
                                  write_manifest)
from samlab.analysis import ScalarModeParams, measured_envelope, \
    scalar_map_iterate
from samlab.landscapes import SharpWell2D, TwoScaleQuadratic
from samlab.metric import realize
from samlab.stochsim import WellSpec

_CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def _minimal_raw(**overrides):
    raw = {
        "tag": "escape-toy",
        "seeds": [0],
        "variants": {"sgdm": {"rule": "sgdm", "lr": 0.1}},
    }
    raw.update(overrides)
    return raw


# ---------------------------------------------------------------------------
# config parsing and validation
# ---------------------------------------------------------------------------


def test_minimal_config_accepts_and_freezes():
    cfg = config_from_mapping(_minimal_raw())
    assert cfg.tag == "escape-toy"
    assert cfg.seeds == (0,)
    assert cfg.out_dir == "runs/escape-toy"
    with pytest.raises(TypeError):
        cfg.variants["sgdm"]["lr"] = 0.2


@pytest.mark.parametrize("mutation,message", [
    ({"tag": "escape"}, "unknown experiment tag"),
    ({"seeds": []}, "non-empty"),
    ({"seeds": [-1]}, "nonnegative"),
    ({"seeds": [True]}, "nonnegative"),
    ({"seeds": "0"}, "list"),
    ({"variants": {}}, "at least one optimizer variant"),
    ({"variants": {"v": {"lr": 0.1}}}, "missing its step rule"),
    ({"variants": {"v": {"rule": "adamw", "lr": 0.1}}}, "unknown rule"),
    ({"landscape": {"kind": "mnist"}}, "unknown landscape kind"),
    ({"metric": {"kind": "fisher"}}, "unknown metric kind"),
    ({"horizons": {"steps": 0}}, "positive integer"),
    ({"horizons": {"steps": "many"}}, "positive integer"),
    ({"bogus_key": 1}, "unknown config keys"),
])
def test_config_rejections(mutation, message):
    with pytest.raises(ConfigError, match=message):
        config_from_mapping(_minimal_raw(**mutation))


def test_config_requires_tag_and_seeds():
    with pytest.raises(ConfigError, match="missing the experiment tag"):
        config_from_mapping({"seeds": [0]})
    with pytest.raises(ConfigError, match="explicit seed list"):
        config_from_mapping({"tag": "escape-toy"})
    with pytest.raises(ConfigError, match="root"):
        config_from_mapping([1, 2])


def test_config_overrides():
    cfg = config_from_mapping(_minimal_raw(seeds=[0, 1, 2]))
    assert cfg.with_overrides(seed=9).seeds == (9,)
    assert cfg.with_overrides(out_dir="/tmp/x").out_dir == "/tmp/x"
    same = cfg.with_overrides()
    assert same.seeds == cfg.seeds and same.out_dir == cfg.out_dir


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("tag = [unclosed\n")
    with pytest.raises(ConfigError, match="could not parse"):
        load_config(bad)


def test_checked_in_configs_match_the_canonical_definitions():
    files = sorted(_CONFIG_DIR.glob("*.toml"))
    assert len(files) == len(EXPERIMENT_TAGS) == 9
    seen = set()
    for path in files:
        cfg, _ = load_config(path)
        seen.add(cfg.tag)
        canonical = default_config(cfg.tag, out_dir=cfg.out_dir)
        assert cfg == canonical, f"{path.name} drifted from DEFAULTS"
    assert seen == set(EXPERIMENT_TAGS)


def test_default_config_rejects_unknown_tag():
    with pytest.raises(ConfigError, match="unknown experiment tag"):
        default_config("resnet-sweep")


def test_every_tag_has_a_runner_and_defaults():
    assert set(DEFAULTS) == set(EXPERIMENT_TAGS)
    assert set(exp.RUNNERS) == set(EXPERIMENT_TAGS)


# ---------------------------------------------------------------------------
# spec builders
# ---------------------------------------------------------------------------


def test_build_landscape_kinds():
    assert build_landscape({"kind": "none"}) is None
    well = build_landscape({"kind": "sharp_well", "lambda_flat": 4.0,
                            "ring_depth": 12.0})
    assert isinstance(well, SharpWell2D) and well.ring_depth == 12.0
    quad = build_landscape({"kind": "two_scale_diagonal",
                            "lam_bar": [1.0, 2.0], "lam_eps": [0.0, 5.0]})
    assert isinstance(quad, TwoScaleQuadratic) and quad.commuting
    rot = build_landscape({"kind": "two_scale_rotated",
                           "lam_bar": [1.0, 2.0], "lam_eps": [5.0, 0.0],
                           "angle": 0.6})
    assert not rot.commuting
    wells = build_landscape({"kind": "two_wells", "flat_exit_radius": 0.1,
                             "sharp_curvature": 100.0,
                             "sharp_exit_radius": 0.5})
    assert isinstance(wells, tuple) and all(isinstance(w, WellSpec)
                                            for w in wells)


def test_build_metric_kinds():
    ident = build_metric({"kind": "identity"}, 3)
    np.testing.assert_array_equal(realize(ident), np.eye(3))
    scaled = build_metric({"kind": "scaled_identity", "scale": 25.0}, 2)
    np.testing.assert_array_equal(realize(scaled), 25.0 * np.eye(2))
    diag = build_metric({"kind": "diagonal", "entries": [1.0, 2.0]}, 2)
    np.testing.assert_array_equal(realize(diag), np.diag([1.0, 2.0]))
    quad = TwoScaleQuadratic.diagonal([2.0, 4.0], [0.0, 0.0])
    inv = build_metric({"kind": "from_average"}, 2, landscape=quad)
    np.testing.assert_allclose(realize(inv), np.diag([0.5, 0.25]), rtol=1e-14)
    with pytest.raises(ConfigError, match="two-scale"):
        build_metric({"kind": "from_average"}, 2, landscape=None)


def test_build_optimizer_maps_fields_and_errors():
    opt = build_optimizer({"rule": "lqr_sam", "lr": 0.01, "rho": 0.6,
                           "momentum": 0.9})
    assert opt.rule == "lqr_sam" and opt.rho == 0.6 and opt.momentum == 0.9
    with pytest.raises(ConfigError, match="invalid optimizer"):
        build_optimizer({"rule": "sgdm", "lr": -1.0})


def test_vectorized_scalar_grid_matches_the_reference_map():
    p = ScalarModeParams(eta=0.01, mu=4.0, rho=0.1, lam_bar=1.0)
    grid = iterate_scalar_grid(np.array([p.a]), np.array([p.b]), 1.0, 5000)
    reference = measured_envelope(scalar_map_iterate(p, 1.0, 5000))
    assert grid[0] == reference


# ---------------------------------------------------------------------------
# deterministic artifact emission
# ---------------------------------------------------------------------------


def test_format_cell_conventions():
    assert format_cell(True) == "true"
    assert format_cell(3) == "3"
    assert format_cell(0.1) == "0.10000000000000001"
    assert format_cell(float("nan")) == "nan"
    assert format_cell(float("-inf")) == "-inf"
    assert format_cell("sharp") == "sharp"


def test_write_csv_uses_lf_and_17_digits(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["a", "b"], [[1, 1.0 / 3.0]])
    data = path.read_bytes()
    assert b"\r" not in data
    assert data == b"a,b\n1,0.33333333333333331\n"


def test_json_bytes_is_canonical():
    payload = {"b": np.float64(1.5), "a": [np.int64(2), float("inf")]}
    out = json_bytes(payload)
    assert out == b'{\n  "a": [\n    2,\n    "inf"\n  ],\n  "b": 1.5\n}\n'
    assert json_bytes(payload) == out


def test_manifest_records_artifact_digests(tmp_path):
    f = write_json(tmp_path / "summary.json", {"x": 1})
    manifest = write_manifest(tmp_path, "escape-toy", [0], "c0ffee", [f],
                              "0.1.0")
    payload = json.loads(manifest.read_text())
    assert payload["tag"] == "escape-toy"
    assert payload["config_sha256"] == "c0ffee"
    assert payload["artifacts"] == {"summary.json": sha256_file(f)}
    assert sha256_bytes(b"") == (
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855")


def _short_escape_config(out_dir, seeds=(0,)):
    raw = dict(DEFAULTS["escape-toy"])
    raw = {k: v for k, v in raw.items()}
    raw["seeds"] = list(seeds)
    raw["out_dir"] = str(out_dir)
    raw["horizons"] = {"steps": 40}
    return config_from_mapping(raw)


def test_run_experiment_writes_manifest_and_artifacts(tmp_path):
    cfg = _short_escape_config(tmp_path / "run")
    artifacts = run_experiment(cfg, config_digest="abc123")
    names = {p.name for p in artifacts}
    assert "manifest.json" in names and "summary.json" in names
    assert {"trajectory_sgdm.csv", "trajectory_sam.csv"} <= names
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["config_sha256"] == "abc123"
    for name, digest in manifest["artifacts"].items():
        assert sha256_file(tmp_path / "run" / name) == digest
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert {r["variant"] for r in summary["runs"]} == set(cfg.variants)
    for row in summary["runs"]:
        assert set(row) >= {"variant", "seed", "sigma_sq", "exit_step",
                            "path_length", "final_region"}


def test_rerun_is_byte_identical(tmp_path):
    cfg_a = _short_escape_config(tmp_path / "a")
    cfg_b = _short_escape_config(tmp_path / "b")
    run_experiment(cfg_a, config_digest="d")
    run_experiment(cfg_b, config_digest="d")
    files_a = sorted(p.name for p in (tmp_path / "a").iterdir())
    files_b = sorted(p.name for p in (tmp_path / "b").iterdir())
    assert files_a == files_b
    for name in files_a:
        assert sha256_file(tmp_path / "a" / name) == \
            sha256_file(tmp_path / "b" / name), name


def test_worker_pool_matches_serial_execution(tmp_path):
    cfg = _short_escape_config(tmp_path / "x", seeds=(0, 1))
    serial = run_trajectory_suite(cfg, jobs=1)
    parallel = run_trajectory_suite(cfg, jobs=2)
    assert sorted(serial) == sorted(parallel)
    for key in serial:
        np.testing.assert_array_equal(serial[key].losses,
                                      parallel[key].losses)
        np.testing.assert_array_equal(serial[key].final_theta,
                                      parallel[key].final_theta)


def test_trajectory_csv_layout(tmp_path):
    cfg = _short_escape_config(tmp_path / "run")
    run_experiment(cfg, config_digest="e")
    lines = (tmp_path / "run" / "trajectory_lqr_sam.csv").read_text() \
        .splitlines()
    assert lines[0] == ("step,x,y,loss,grad_norm,grad_dual_norm,probe_norm,"
                        "path_length,region")
    assert len(lines) == 41
    first = lines[1].split(",")
    assert first[0] == "0"
    assert first[-1] in ("flat", "sharp", "neither")


# ---------------------------------------------------------------------------
# CLI behaviour
# ---------------------------------------------------------------------------


def test_cli_list_exits_clean(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    for tag in EXPERIMENT_TAGS:
        assert tag in out


def test_cli_run_happy_path(tmp_path, capsys):
    config = tmp_path / "run.toml"
    config.write_text(
        'tag = "escape-toy"\nseeds = [0]\n'
        f'out_dir = "{tmp_path / "out"}"\n'
        '[landscape]\nkind = "sharp_well"\n'
        '[metric]\nkind = "scaled_identity"\nscale = 25.0\n'
        '[horizons]\nsteps = 25\n'
        '[variants.sgdm]\nrule = "sgdm"\nlr = 6.75e-4\n'
        '[grids]\nstart = [4.8, 0.0]\nnoise_variance = 0.0\n')
    assert cli.main(["run", str(config)]) == 0
    assert (tmp_path / "out" / "manifest.json").is_file()
    assert "manifest.json" in capsys.readouterr().out


def test_cli_seed_override(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text(
        'tag = "escape-toy"\nseeds = [0, 1]\n'
        '[horizons]\nsteps = 10\n'
        '[variants.sgdm]\nrule = "sgdm"\nlr = 6.75e-4\n'
        '[landscape]\nkind = "sharp_well"\n'
        '[grids]\nstart = [4.8, 0.0]\nnoise_variance = 0.0\n')
    out = tmp_path / "over"
    assert cli.main(["run", str(config), "--out", str(out), "--seed", "7"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [7]


def test_cli_config_error_is_exit_code_1(tmp_path, capsys):
    config = tmp_path / "bad.toml"
    config.write_text('tag = "nope"\nseeds = [0]\n')
    assert cli.main(["run", str(config)]) == 1
    assert "config error" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.toml")]) == 1


def test_cli_aborted_run_is_exit_code_2(tmp_path, monkeypatch, capsys):
    config = tmp_path / "run.toml"
    config.write_text(
        'tag = "escape-toy"\nseeds = [0]\n'
        f'out_dir = "{tmp_path / "out"}"\n'
        '[horizons]\nsteps = 10\n'
        '[variants.sgdm]\nrule = "sgdm"\nlr = 6.75e-4\n')

    def _boom(cfg, config_digest, jobs=1):
        raise RuntimeError("non-finite loss at step 3")

    monkeypatch.setattr(cli, "run_experiment", _boom)
    assert cli.main(["run", str(config)]) == 2
    assert "non-finite" in capsys.readouterr().err


def test_cli_verify_failure_is_exit_code_3(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "verify",
                        lambda out_dir: (False, Path(out_dir) / "report.json"))
    assert cli.main(["verify", "--out", str(tmp_path)]) == 3
    assert "failed" in capsys.readouterr().err.lower()


def test_cli_verify_success_is_exit_code_0(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(cli, "verify",
                        lambda out_dir: (True, Path(out_dir) / "report.json"))
    assert cli.main(["verify", "--out", str(tmp_path)]) == 0


# ---------------------------------------------------------------------------
# verification-suite sanity
# ---------------------------------------------------------------------------


def test_corrupted_amplitude_formula_is_caught(monkeypatch):
    real = exp.two_cycle_amplitude
    monkeypatch.setattr(exp, "two_cycle_amplitude",
                        lambda p: 1.01 * real(p))
    result = verify_mod.check_two_cycle_amplitude_grid()
    assert not result.passed


def test_corrupted_stationary_variance_is_caught(monkeypatch):
    real = exp.ar1_stationary_stats
    monkeypatch.setattr(exp, "ar1_stationary_stats",
                        lambda p: tuple(1.05 * v for v in real(p)))
    result = verify_mod.check_noise_damping_statistics()
    assert not result.passed


def test_check_failures_are_reported_not_raised(monkeypatch):
    def check_synthetic():
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(verify_mod, "_CHECKS", (check_synthetic,))
    results = verify_mod.run_checks()
    by_name = {r.name: r for r in results}
    assert not by_name["synthetic"].passed
    assert "synthetic failure" in by_name["synthetic"].detail


def test_report_payload_serialization_is_stable():
    payload = {"checks": [{"name": "x", "passed": True,
                           "measured": np.float64(1e-12)}],
               "all_passed": True}
    assert json_bytes(payload) == json_bytes(json.loads(json_bytes(payload)))
