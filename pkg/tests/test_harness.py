from __future__ import annotations

import json
import math

import numpy as np
import pytest

from sgld_cmd import cli
from sgld_cmd.errors import ConfigurationError
from sgld_cmd.harness import (
    ExperimentConfig,
    HarnessError,
    _check_divergence,
    apply_overrides,
    emit_csv,
    emit_json,
    read_csv,
    resolve_eta,
    run_experiment,
    simulate_statistics,
    theorem_regime,
)

GM = {"name": "gaussian_mean", "d": 1, "sigma2": 1.0}


def test_regime_examples():
    r = theorem_regime(1000, 0.01, 1.0)
    assert r.tag == "regime-i" and r.boundary == pytest.approx(10**3.25)
    assert theorem_regime(10**5, 0.01, 1.0).tag == "regime-ii"
    b4 = theorem_regime(100, 0.01, 4.0).boundary
    assert b4 == pytest.approx(10**3.25 * 4 ** (-9 / 8), rel=1e-12)
    assert b4 == pytest.approx(373.8, abs=0.1)
    with pytest.raises(ConfigurationError):
        theorem_regime(0, 0.1, 1.0)


def test_regime_validity_scales():
    r = theorem_regime(1000, 0.01, 1.0)
    assert r.validity_scale == pytest.approx(0.01 ** (-1 / 12))
    m, eta = 10**5, 0.01
    r2 = theorem_regime(m, eta, 1.0)
    assert r2.validity_scale == pytest.approx(min((m * eta) ** (1 / 6), 1 / (math.sqrt(m) * eta)))


def test_eta_rules():
    assert resolve_eta("m^-0.6", 1024) == pytest.approx(1024**-0.6)
    assert resolve_eta(0.1, 5) == 0.1
    for c in (1.0, 3.0):
        eta = resolve_eta(f"coupled:C={c}", 10**5)
        assert c / (eta**2 * abs(math.log(eta))) == pytest.approx(10**5, rel=1e-9)
    assert resolve_eta({"rule": "coupled"}, 10**4) == resolve_eta("coupled", 10**4)
    with pytest.raises(ConfigurationError):
        resolve_eta("sqrt", 10)
    with pytest.raises(ConfigurationError):
        resolve_eta("coupled:C=1", 5)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ExperimentConfig("tail-ratio", replications=0)
    with pytest.raises(ConfigurationError):
        ExperimentConfig("nope")
    with pytest.raises(ConfigurationError):
        ExperimentConfig("tail-ratio", params={"unknown": 1})
    with pytest.raises(ConfigurationError):
        ExperimentConfig.from_dict({"experiment": "tail-ratio", "typo": 1})


def test_config_hash_ignores_workers():
    a = ExperimentConfig("tail-ratio", workers=1, out="a")
    b = ExperimentConfig("tail-ratio", workers=4, out="b")
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != ExperimentConfig("tail-ratio", seed=1).config_hash()


def test_overrides(monkeypatch):
    cfg = ExperimentConfig("tail-ratio", seed=1, workers=1)
    monkeypatch.setenv("SGLD_CMD_SEED", "7")
    monkeypatch.setenv("SGLD_CMD_WORKERS", "3")
    got = apply_overrides(cfg)
    assert (got.seed, got.workers) == (7, 3)
    assert apply_overrides(cfg, seed=9).seed == 9


def test_csv_header_only(tmp_path):
    p = emit_csv([], tmp_path / "e.csv", ["a", "b"])
    lines = p.read_text().splitlines()
    assert lines[0].startswith("# ") and lines[1:] == ["a,b"]
    assert read_csv(p) == []


def test_csv_round_trip(tmp_path):
    recs = [{"a": 0.1 + 0.2, "b": 3, "c": "regime-i", "d": True}, {"a": -1e-300, "b": -2, "c": "x", "d": False}]
    p = emit_csv(recs, tmp_path / "r.csv")
    assert read_csv(p) == recs


def test_nan_serialized_and_flagged(tmp_path):
    p = emit_csv([{"x": float("nan")}], tmp_path / "n.csv")
    assert p.read_text().splitlines()[-1] == "nan"
    flagged = emit_json({"stat": {"ks": float("nan")}, "ok": 1.0}, tmp_path / "s.json")
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["stat"]["ks"] == "nan" and flagged == ["stat.ks"] and data["nan_fields"] == ["stat.ks"]


def test_io_error_has_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(HarnessError, match="file"):
        emit_csv([{"a": 1}], blocker / "sub" / "x.csv")


def test_divergence_accounting():
    log = {}
    mask = np.zeros(1000, dtype=bool)
    mask[:10] = True
    _check_divergence(mask, "p", log)
    assert log["p"] == 10
    mask[10] = True
    with pytest.raises(HarnessError):
        _check_divergence(mask, "p", log)


def test_audit_single_replication(tmp_path):
    cfg = ExperimentConfig("audit-decomposition", problem=GM, eta=0.05, m=[256], replications=1, out=str(tmp_path))
    man = run_experiment(cfg)
    rows = read_csv(tmp_path / "audit-decomposition.csv")
    assert len(rows) == 1
    assert rows[0]["identity_residual"] <= 1e-8 * (1 + abs(rows[0]["lhs"]))
    assert man.checks["decomposition_identity"]["pass"]


def test_audit_saves_trajectories(tmp_path):
    cfg = ExperimentConfig(
        "audit-decomposition", problem=GM, eta=0.05, m=[64], replications=3, out=str(tmp_path), audit=True,
        params={"audit_trajectories": 2},
    )
    run_experiment(cfg)
    saved = sorted(p.name for p in (tmp_path / "trajectories").iterdir())
    assert saved == ["m64_rep0.noise.npz", "m64_rep0.npy", "m64_rep1.noise.npz", "m64_rep1.npy"]


def test_w1_scan_repeat_identical(tmp_path):
    params = {"n_samples": 4000, "n_batches": 4, "chains_per_stream": 500}
    out = []
    for name in ("a", "b"):
        cfg = ExperimentConfig("w1-scan", problem=GM, eta=[0.2, 0.2], out=str(tmp_path / name), params=params)
        run_experiment(cfg)
        out.append((tmp_path / name / "w1-scan.csv").read_bytes())
    assert out[0] == out[1]
    rows = read_csv(tmp_path / "a" / "w1-scan.csv")
    assert rows[0]["w1"] == rows[1]["w1"]


@pytest.mark.parametrize("experiment", ["audit-decomposition", "tail-ratio"])
def test_worker_count_independent(tmp_path, experiment):
    blobs = []
    for workers in (1, 2):
        cfg = ExperimentConfig(
            experiment, problem=GM, eta=0.05, m=[128], replications=30, block_size=7,
            workers=workers, out=str(tmp_path / str(workers)),
        )
        with pytest.warns(RuntimeWarning):
            run_experiment(cfg)
        blobs.append((tmp_path / str(workers) / f"{experiment}.csv").read_bytes())
    assert blobs[0] == blobs[1]


def test_block_size_is_part_of_result_identity():
    # replication i uses stream i regardless of blocking
    a = simulate_statistics(GM, {"kind": "linear"}, 64, 0.1, 1.0, 10, 5, block_size=3)
    b = simulate_statistics(GM, {"kind": "linear"}, 64, 0.1, 1.0, 10, 5, block_size=10)
    assert np.array_equal(a["w"], b["w"])


def test_rows_carry_regime(tmp_path):
    cfg = ExperimentConfig("tail-ratio", problem=GM, eta="m^-0.6", m=[64, 128], replications=20, out=str(tmp_path))
    with pytest.warns(RuntimeWarning):
        man = run_experiment(cfg)
    for r in read_csv(tmp_path / "tail-ratio.csv"):
        assert r["regime"] in ("regime-i", "regime-ii") and r["m"] in (64, 128)
        assert r["eta"] == pytest.approx(r["m"] ** -0.6) and r["delta"] == 1
    assert {p["m"] for p in man.points} == {64, 128}
    assert all("seed" in p for p in man.points)


def test_perturbed_problem_uses_grid_field(tmp_path):
    cfg = ExperimentConfig(
        "tail-ratio",
        problem={"name": "perturbed_quadratic", "d": 1, "epsilon": 0.1},
        eta=0.05,
        m=[256],
        replications=20,
        out=str(tmp_path),
        params={"stein_budget": 200, "grid": [{"lower": -4, "upper": 4, "n": 9}]},
    )
    with pytest.warns(RuntimeWarning):
        man = run_experiment(cfg)
    assert len(read_csv(tmp_path / "tail-ratio.csv")) == 8


def _write(tmp_path, data):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(data))
    return str(p)


def test_cli_exit_codes(tmp_path, capsys):
    ok = _write(tmp_path, {"problem": GM, "params": {"n_pairs": 500, "n_samples": 2000}})
    assert cli.main(["audit-assumptions", "--config", ok, "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "manifest.json").exists()
    assert (tmp_path / "o" / "audit-assumptions.csv").exists()
    bad = _write(tmp_path, {"problem": GM, "eta": 0.05, "m": [64], "replications": 20, "params": {"tail_tol": 0.0}})
    with pytest.warns(RuntimeWarning):
        assert cli.main(["tail-ratio", "--config", bad, "--out", str(tmp_path / "f")]) == 2
    assert cli.main(["tail-ratio", "--config", str(tmp_path / "missing.json")]) == 1
    zero = _write(tmp_path, {"replications": 0})
    assert cli.main(["tail-ratio", "--config", zero]) == 1
    assert "error" in capsys.readouterr().err
