"""Experiment orchestration.

Replications are split into fixed blocks of ``block_size`` indices; each
block is simulated by one worker and the results are merged by block index.
Chain ``i`` of a configuration point always draws from
``derive_stream(point_seed, i, "chain")``, so outputs are identical for any
worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import platform
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .dynamics import BURN_IN_C, ChainBatch, Trajectory, derive_stream, save_trajectory
from .errors import ConfigurationError, SgldError
from .problems import (
    AssumptionConstants,
    TestFunction,
    build_problem,
    check_dissipativity,
    check_lipschitz,
    check_subgaussian,
)
from .stats import (
    checkpoints,
    decomposition_audit,
    exp_moment_at,
    ks_distance,
    tail_ratio_table,
    w1_sorted,
)
from .stein import analytic_stein_ou, estimate_pi_h, grid_field, stein_f_mc, stein_residual_check

log = logging.getLogger(__name__)

__all__ = [
    "EXPERIMENTS",
    "ExperimentConfig",
    "HarnessError",
    "Regime",
    "RunManifest",
    "emit_csv",
    "emit_json",
    "read_csv",
    "resolve_eta",
    "run_experiment",
    "simulate_statistics",
    "theorem_regime",
]

EXPERIMENTS = ("tail-ratio", "berry-esseen", "w1-scan", "audit-decomposition", "audit-assumptions", "stein-check")
CSV_SCHEMA = "sgld-cmd-csv/1"
MAX_DIVERGENCE_FRACTION = 0.01


class HarnessError(SgldError):
    """A run could not complete (for example too many divergent replications)."""


# ---------------------------------------------------------------------------
# Regimes and step-size rules


@dataclass(frozen=True)
class Regime:
    tag: str
    boundary: float
    validity_scale: float
    note: str


def theorem_regime(m: float, eta: float, delta: float) -> Regime:
    """Classify ``(m, eta, delta)`` against the boundary ``eta^(-13/8) delta^(-9/8)``.

    The validity scale is the expression inside the ``o(.)`` bound on ``x``,
    evaluated numerically; it is a scale, not a cutoff.
    """
    if not (m > 0 and eta > 0 and delta > 0):
        raise ConfigurationError("m, eta and delta must be positive")
    boundary = eta ** (-13 / 8) * delta ** (-9 / 8)
    if m <= boundary:
        scale = eta ** (-1 / 12) * delta ** (1 / 12)
        return Regime("regime-i", boundary, scale, "x = o(eta^(-1/12) delta^(1/12))")
    scale = min((m * eta * delta) ** (1 / 6), 1.0 / (math.sqrt(m) * eta * delta))
    return Regime("regime-ii", boundary, scale, "x = o((m eta delta)^(1/6) ^ (sqrt(m) eta delta)^(-1))")


def resolve_eta(rule, m: int) -> float:
    """Step size for ``m`` from a number, ``"m^-0.6"``, ``"coupled:C=1"`` or a dict rule.

    The coupled rule solves ``m = C eta^-2 / |ln eta|`` on the small-step
    branch ``eta < exp(-1/2)``, where the right side is decreasing.
    """
    if isinstance(rule, (int, float)):
        return float(rule)
    if isinstance(rule, str):
        text = rule.replace(" ", "")
        if text.startswith("m^"):
            rule = {"rule": "power", "exponent": float(text[2:])}
        elif text.startswith("coupled"):
            c = 1.0
            if ":" in text:
                key, _, val = text.split(":", 1)[1].partition("=")
                if key != "C":
                    raise ConfigurationError(f"bad coupled rule {rule!r}")
                c = float(val)
            rule = {"rule": "coupled", "C": c}
        else:
            try:
                return float(text)
            except ValueError:
                raise ConfigurationError(f"unrecognised eta rule {rule!r}") from None
    if isinstance(rule, dict):
        kind = rule.get("rule")
        if kind == "power":
            return float(m) ** float(rule["exponent"])
        if kind == "coupled":
            from scipy.optimize import brentq

            c = float(rule.get("C", 1.0))
            if not c > 0:
                raise ConfigurationError("coupling constant C must be positive")
            top = math.exp(-0.5)
            floor = c * 2 * math.e
            if m <= floor:
                raise ConfigurationError(f"coupled rule needs m > 2eC = {floor:.3g}")
            return float(brentq(lambda e: c / (e * e * -math.log(e)) - m, 1e-150, top, xtol=1e-300, rtol=1e-15))
    raise ConfigurationError(f"unrecognised eta rule {rule!r}")


def _resolve_burn_in(rule, eta: float) -> int:
    if rule in (None, "auto"):
        return math.ceil(BURN_IN_C / eta)
    if isinstance(rule, dict):
        return math.ceil(float(rule.get("c", BURN_IN_C)) / eta)
    if int(rule) != rule or rule < 0:
        raise ConfigurationError(f"bad burn_in {rule!r}")
    return int(rule)


# ---------------------------------------------------------------------------
# Configuration and manifest


@dataclass
class ExperimentConfig:
    """Resolved description of one experiment run.

    ``eta`` is a number or rule for chain experiments and a list of numbers
    for ``w1-scan``. ``params`` holds experiment-specific knobs (tolerances,
    sample sizes, Stein settings); unknown keys are rejected.
    """

    experiment: str
    problem: dict = field(default_factory=lambda: {"name": "gaussian_mean", "d": 1, "sigma2": 1.0})
    h: dict = field(default_factory=lambda: {"kind": "linear"})
    eta: Any = 0.05
    delta: float = 1.0
    m: list = field(default_factory=lambda: [1024])
    burn_in: Any = "auto"
    replications: int = 1000
    seed: int = 0
    x_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5])
    out: str = "runs"
    workers: int = 1
    block_size: int = 1000
    initial_state: Any = 0.0
    audit: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if isinstance(self.m, int):
            self.m = [self.m]
        self.m = [int(v) for v in self.m]
        if any(v < 1 for v in self.m):
            raise ConfigurationError("every m must be a positive integer")
        if int(self.replications) != self.replications or self.replications < 1:
            raise ConfigurationError(f"replications must be a positive integer, got {self.replications!r}")
        self.replications = int(self.replications)
        if not self.delta > 0:
            raise ConfigurationError("delta must be positive")
        if self.workers < 1 or self.block_size < 1:
            raise ConfigurationError("workers and block_size must be positive")
        if self.experiment == "w1-scan":
            etas = self.eta if isinstance(self.eta, list) else [self.eta]
            if not all(isinstance(e, (int, float)) and 0 < e < 2 for e in etas):
                raise ConfigurationError("w1-scan needs numeric step sizes in (0, 2)")
            self.eta = [float(e) for e in etas]
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.experiment])
        if unknown:
            raise ConfigurationError(f"unknown params for {self.experiment}: {sorted(unknown)}")
        self.params = {**_DEFAULT_PARAMS[self.experiment], **self.params}

    @classmethod
    def from_dict(cls, data: dict, experiment: str | None = None) -> "ExperimentConfig":
        data = dict(data)
        if experiment is not None:
            if data.get("experiment", experiment) != experiment:
                raise ConfigurationError(
                    f"config is for {data['experiment']!r} but {experiment!r} was requested"
                )
            data["experiment"] = experiment
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path, experiment: str | None = None) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, experiment)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Hash of everything that affects results (not workers or output dir)."""
        d = self.to_dict()
        for k in ("workers", "out", "audit"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_DEFAULT_PARAMS: dict[str, dict] = {
    "tail-ratio": {"tail_tol": 0.15, "gamma": 0.05, "grid": None, "stein_budget": 4000},
    "berry-esseen": {"band": 0.5, "gamma": 0.05, "grid": None, "stein_budget": 4000},
    "w1-scan": {"n_samples": 1_000_000, "n_batches": 20, "chains_per_stream": 1000, "n_se": 3.0},
    "audit-decomposition": {"identity_tol": 1e-8, "n_se": 4.0, "audit_trajectories": 10},
    "audit-assumptions": {
        "n_pairs": 10_000,
        "radius": 10.0,
        "gamma": 0.05,
        "n_samples": 100_000,
        "cap": 1e3,
        "negative_controls": True,
    },
    "stein-check": {
        "points": [-2.0, 0.0, 2.0],
        "T": 15.0,
        "dt": 0.01,
        "n_paths": 100_000,
        "tol": 0.05,
        "residual_points": 20,
        "residual_tol": 1e-12,
    },
}


@dataclass
class RunManifest:
    config: dict
    config_hash: str
    points: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    divergences: dict = field(default_factory=dict)
    version: str = ""
    artifacts: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(bool(v.get("pass")) for v in self.checks.values())

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passed"] = self.passed
        return d


def _version_tag() -> str:
    return f"sgld-cmd {__version__}; numpy {np.__version__}; python {platform.python_version()}"


def _point_seed(seed: int, label: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}|{label}".encode()).digest()[:8], "little")


def _point_entry(m, eta, delta, seed, burn_in=None) -> dict:
    reg = theorem_regime(m, eta, delta)
    entry = {
        "m": m,
        "eta": eta,
        "delta": delta,
        "seed": seed,
        "burn_in": burn_in,
        "regime": reg.tag,
        "regime_boundary": reg.boundary,
        "validity_scale": reg.validity_scale,
        "validity_note": reg.note,
        "m_eta": m * eta,
        "m_eta_sq": m * eta * eta,
        "warnings": [],
    }
    # numeric proxies for m = o(eta^-2) and m eta -> infinity
    if m * eta * eta > 0.1:
        entry["warnings"].append("m * eta^2 > 0.1: m = o(eta^-2) is doubtful")
    if m * eta < 10:
        entry["warnings"].append("m * eta < 10: m eta -> infinity is doubtful")
    for w in entry["warnings"]:
        warnings.warn(f"(m={m}, eta={eta:.4g}): {w}", RuntimeWarning)
    return entry


# ---------------------------------------------------------------------------
# Output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def emit_csv(records, path, columns=None) -> Path:
    """Write records with a schema comment line, a header, and 17-digit floats."""
    path = Path(path)
    records = list(records)
    if columns is None:
        columns = list(records[0]) if records else []
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# {CSV_SCHEMA}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(columns)
            for rec in records:
                writer.writerow([_fmt(rec.get(c)) for c in columns])
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from exc
    return path


def _parse(v: str):
    if v == "":
        return None
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [{k: _parse(v) for k, v in row.items()} for row in reader]


def _jsonable(obj, trail, nan_paths):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v, f"{trail}.{k}" if trail else str(k), nan_paths) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v, f"{trail}[{i}]", nan_paths) for i, v in enumerate(obj)]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist(), trail, nan_paths)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            nan_paths.append(trail)
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def emit_json(summary: dict, path) -> list[str]:
    """Write ``summary`` as JSON. NaNs become ``"nan"`` and are listed under ``nan_fields``."""
    path = Path(path)
    nan_paths: list[str] = []
    data = _jsonable(summary, "", nan_paths)
    data["nan_fields"] = nan_paths
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise HarnessError(f"cannot write {path}: {exc}") from exc
    return nan_paths


# ---------------------------------------------------------------------------
# Field resolution


def _field_and_pi(problem, h, eta, delta, params, seed):
    """Analytic Stein field when available, otherwise a Monte Carlo grid field."""
    if problem.analytic is not None:
        return problem.analytic.stein(h, eta, delta), problem.analytic.pi_h(h, eta, delta)
    grid = params.get("grid") or [{"lower": -6.0, "upper": 6.0, "n": 49}] * problem.dim
    pi_h, _ = estimate_pi_h(problem, h, eta, delta, stream=derive_stream(seed, 0, "pi_h"))
    fld = grid_field(problem, h, grid, params.get("stein_budget", 4000), eta, delta, pi_h, seed=seed)
    return fld, pi_h


# ---------------------------------------------------------------------------
# Worker kernels (module level so they pickle)


def _stat_block(task):
    pspec, hspec, m, eta, delta, burn, seed, lo, hi, x0, fld, pi_h = task
    problem = build_problem(pspec)
    h = TestFunction.from_spec(hspec, problem.dim)
    if fld is None:
        fld, pi_h = _field_and_pi(problem, h, eta, delta, {}, seed)
    streams = [derive_stream(seed, i, "chain") for i in range(lo, hi)]
    batch = ChainBatch(problem, eta, delta, streams, x0)
    batch.run(burn)
    n = hi - lo
    sum_h = np.zeros(n)
    sum_g2 = np.zeros(n)
    ks = checkpoints(m)
    cps = np.empty((n, len(ks), problem.dim))

    def observe(k0, states, zeta, xi):
        k0 -= burn
        sum_h[:] += h(states).sum(axis=0)
        g = fld.grad_f(states)
        sum_g2[:] += np.einsum("cbi,cbi->b", g, g)
        for j, k in enumerate(ks):
            if k0 <= k < k0 + len(states):
                cps[:, j] = states[k - k0]

    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        batch.run(m, observe)
        y = sum_g2 / m
        w = math.sqrt(m * eta) * (sum_h / m - pi_h) / np.sqrt(delta * y)
    return {"w": w, "pi_hat": sum_h / m, "y": y, "checkpoints": cps, "diverged": batch.diverged.copy()}


def _audit_block(task):
    pspec, hspec, m, eta, delta, burn, seed, lo, hi, x0, keep = task
    problem = build_problem(pspec)
    h = TestFunction.from_spec(hspec, problem.dim)
    if problem.analytic is None:
        raise ConfigurationError("audit-decomposition needs a problem with an analytic Stein solution")
    fld = problem.analytic.stein(h, eta, delta)
    pi_h = problem.analytic.pi_h(h, eta, delta)
    streams = [derive_stream(seed, i, "chain") for i in range(lo, hi)]
    batch = ChainBatch(problem, eta, delta, streams, x0)
    batch.run(burn)
    n, d, r = hi - lo, problem.dim, problem.zeta_dim
    states = np.empty((m, n, d))
    zetas = np.empty((m, n, r))
    xis = np.empty((m, n, d))

    def record(k0, st, z, x):
        k = k0 - burn
        states[k : k + len(st)] = st
        zetas[k : k + len(st)] = z
        xis[k : k + len(st)] = x

    final = batch.run(m, record)
    out, trajs = [], []
    for b in range(n):
        if batch.diverged[b]:
            out.append(None)
            continue
        traj = Trajectory(states[:, b].copy(), final[b].copy(), eta, delta, zetas[:, b].copy(), xis[:, b].copy())
        res = decomposition_audit(traj, h, fld, problem, pi_h, eta, delta, index=lo + b)
        out.append(res)
        if lo + b < keep:
            trajs.append((lo + b, traj))
    return {"results": out, "trajectories": trajs, "diverged": batch.diverged.copy()}


def _stationary_block(task):
    pspec, eta, delta, burn, seed, lo, hi, width, x0 = task
    problem = build_problem(pspec)
    streams = [derive_stream(seed, i, "stationary") for i in range(lo, hi)]
    batch = ChainBatch(problem, eta, delta, streams, x0, width=width)
    final = batch.run(burn)
    return {"samples": final, "diverged": batch.diverged.copy()}


def _map(fn, tasks, workers):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


def _blocks(n: int, size: int):
    return [(lo, min(n, lo + size)) for lo in range(0, n, size)]


def _check_divergence(diverged: np.ndarray, label: str, divergences: dict):
    count = int(diverged.sum())
    divergences[label] = count
    if count > MAX_DIVERGENCE_FRACTION * diverged.size:
        raise HarnessError(f"{label}: {count} of {diverged.size} replications diverged (> 1%)")
    if count:
        log.warning("%s: excluded %d divergent replications", label, count)


def simulate_statistics(
    problem_spec: dict,
    h_spec: dict,
    m: int,
    eta: float,
    delta: float,
    replications: int,
    seed: int,
    burn_in=None,
    block_size: int = 1000,
    workers: int = 1,
    initial_state=0.0,
    params: dict | None = None,
) -> dict:
    """Run ``replications`` chains and return per-replication ``w``, ``pi_hat``, ``y``.

    Also returns the states at :func:`~sgld_cmd.stats.checkpoints` (shape
    ``(R, K, d)``) and the divergence mask. ``seed`` is the point seed:
    replication ``i`` uses ``derive_stream(seed, i, "chain")``.
    """
    problem = build_problem(problem_spec)
    h = TestFunction.from_spec(h_spec, problem.dim)
    burn = _resolve_burn_in(burn_in, eta)
    x0 = np.broadcast_to(np.asarray(initial_state, dtype=float), (problem.dim,)).copy()
    fld = pi_h = None
    if problem.analytic is None:
        fld, pi_h = _field_and_pi(problem, h, eta, delta, params or {}, seed)
    tasks = [
        (problem_spec, h_spec, m, eta, delta, burn, seed, lo, hi, x0, fld, pi_h)
        for lo, hi in _blocks(replications, block_size)
    ]
    parts = _map(_stat_block, tasks, workers)
    out = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    out["checkpoint_k"] = np.array(checkpoints(m))
    out["burn_in"] = burn
    if fld is not None and hasattr(fld, "clamped"):
        out["grid_clamped"] = fld.clamped
    return out


# ---------------------------------------------------------------------------
# Experiments


def _chain_points(cfg: ExperimentConfig):
    for m in cfg.m:
        eta = resolve_eta(cfg.eta, m)
        if not 0 < eta < 2:
            raise ConfigurationError(f"resolved eta={eta} for m={m} is outside (0, 2)")
        yield m, eta


def _run_stat_points(cfg, manifest):
    """Simulate every (m, eta) point; returns ``[(entry, sim)]`` with divergent runs removed."""
    results = []
    for m, eta in _chain_points(cfg):
        t0 = time.perf_counter()
        seed = _point_seed(cfg.seed, f"m={m}|eta={eta!r}")
        sim = simulate_statistics(
            cfg.problem, cfg.h, m, eta, cfg.delta, cfg.replications, seed, cfg.burn_in,
            cfg.block_size, cfg.workers, cfg.initial_state, cfg.params,
        )
        entry = _point_entry(m, eta, cfg.delta, seed, sim["burn_in"])
        manifest.points.append(entry)
        _check_divergence(sim["diverged"], f"m={m}", manifest.divergences)
        keep = ~sim["diverged"]
        curve = exp_moment_at(sim["checkpoints"][keep], sim["checkpoint_k"], cfg.params["gamma"])
        entry["exp_moment"] = {
            "gamma": cfg.params["gamma"],
            "k": curve.k,
            "estimate": curve.estimate,
            "stderr": curve.stderr,
            "slope": curve.slope,
            "slope_stderr": curve.slope_stderr,
            "trend_free": curve.trend_free,
        }
        manifest.timings[f"m={m}"] = time.perf_counter() - t0
        results.append((entry, {k: v[keep] if isinstance(v, np.ndarray) and v.shape[:1] == keep.shape else v for k, v in sim.items()}))
    return results


def _exp_tail_ratio(cfg, manifest, out_dir):
    rows = []
    tol = cfg.params["tail_tol"]
    worst = 0.0
    for entry, sim in _run_stat_points(cfg, manifest):
        table = tail_ratio_table(sim["w"], cfg.x_grid, entry["regime"], entry["validity_note"])
        for t in (table, table.mirrored):
            worst = max(worst, t.max_deviation())
            for r in t.rows():
                rows.append({"m": entry["m"], "eta": entry["eta"], "delta": entry["delta"], "n": t.n, **r})
    cols = ["m", "eta", "delta", "regime", "side", "x", "p_hat", "normal_tail", "ratio", "stderr", "n"]
    manifest.artifacts.append(str(emit_csv(rows, out_dir / "tail-ratio.csv", cols)))
    manifest.checks["tail_ratio"] = {"pass": worst <= tol, "max_abs_ratio_minus_1": worst, "tol": tol}


def _exp_berry_esseen(cfg, manifest, out_dir):
    rows = []
    for entry, sim in _run_stat_points(cfg, manifest):
        m = entry["m"]
        rows.append(
            {
                "m": m,
                "eta": entry["eta"],
                "delta": entry["delta"],
                "regime": entry["regime"],
                "n": int(sim["w"].size),
                "ks": ks_distance(sim["w"]),
                "predicted_scale": m ** -0.25 * math.log(m),
                "w_mean": float(np.mean(sim["w"])),
                "w_var": float(np.var(sim["w"], ddof=1)),
            }
        )
    cols = ["m", "eta", "delta", "regime", "n", "ks", "predicted_scale", "w_mean", "w_var"]
    manifest.artifacts.append(str(emit_csv(rows, out_dir / "berry-esseen.csv", cols)))
    ks = [r["ks"] for r in rows]
    decreasing = all(b < a for a, b in zip(ks, ks[1:]))
    manifest.checks["ks_strictly_decreasing"] = {"pass": decreasing, "ks": ks}
    if len(rows) >= 2:
        need = cfg.params["band"] * rows[0]["predicted_scale"] / rows[-1]["predicted_scale"]
        got = ks[0] / ks[-1] if ks[-1] > 0 else math.inf
        manifest.checks["ks_rate_band"] = {"pass": got >= need, "ratio": got, "required": need}


def _gaussian_w1(v1: float, v2: float) -> float:
    """W1 between centred Gaussians: ``sqrt(2/pi) |sd1 - sd2|``."""
    return math.sqrt(2 / math.pi) * abs(math.sqrt(v1) - math.sqrt(v2))


def _exp_w1_scan(cfg, manifest, out_dir):
    problem = build_problem(cfg.problem)
    if problem.analytic is None or problem.dim != 1:
        raise ConfigurationError("w1-scan needs a 1-d problem with a closed-form stationary law")
    p = cfg.params
    width = int(p["chains_per_stream"])
    n_streams = math.ceil(int(p["n_samples"]) / width)
    n = n_streams * width
    nb = int(p["n_batches"])
    if n % nb:
        raise ConfigurationError("n_samples must be divisible by n_batches")
    blk = max(1, cfg.block_size // width) if width < cfg.block_size else 1
    x0 = np.broadcast_to(np.asarray(cfg.initial_state, dtype=float), (1,)).copy()
    rows = []
    for eta in cfg.eta:
        t0 = time.perf_counter()
        seed = _point_seed(cfg.seed, f"w1|eta={eta!r}")
        burn = _resolve_burn_in(cfg.burn_in, eta)
        tasks = [(cfg.problem, eta, cfg.delta, burn, seed, lo, hi, width, x0) for lo, hi in _blocks(n_streams, blk)]
        parts = _map(_stationary_block, tasks, cfg.workers)
        chain = np.concatenate([q["samples"] for q in parts])[:, 0]
        diverged = np.concatenate([q["diverged"] for q in parts])
        _check_divergence(diverged, f"eta={eta}", manifest.divergences)
        chain = chain[~diverged]
        law = problem.analytic
        ref = law.sample_sde_stationary(derive_stream(seed, 0, "reference"), chain.size, eta, cfg.delta)[:, 0]
        est = w1_sorted(chain, ref)
        usable = chain.size - chain.size % nb
        per = [w1_sorted(a, b) for a, b in zip(np.split(chain[:usable], nb), np.split(ref[:usable], nb))]
        se = float(np.std(per, ddof=1) / math.sqrt(nb))
        exact = _gaussian_w1(law.chain_stationary_var(eta, cfg.delta), law.sde_stationary_var(eta, cfg.delta))
        rows.append(
            {
                "eta": eta,
                "delta": cfg.delta,
                "n": int(chain.size),
                "burn_in": burn,
                "w1": est,
                "stderr": se,
                "w1_exact": exact,
                "z": (est - exact) / se if se > 0 else math.inf,
                "sqrt_eta": math.sqrt(eta),
            }
        )
        manifest.points.append({"eta": eta, "delta": cfg.delta, "seed": seed, "burn_in": burn})
        manifest.timings[f"eta={eta}"] = time.perf_counter() - t0
    cols = ["eta", "delta", "n", "burn_in", "w1", "stderr", "w1_exact", "z", "sqrt_eta"]
    manifest.artifacts.append(str(emit_csv(rows, out_dir / "w1-scan.csv", cols)))
    k = p["n_se"]
    manifest.checks["w1_matches_closed_form"] = {
        "pass": all(abs(r["z"]) <= k for r in rows),
        "z": [r["z"] for r in rows],
        "n_se": k,
    }
    order = sorted(rows, key=lambda r: r["eta"])
    manifest.checks["w1_increases_with_eta"] = {
        "pass": all(b["w1"] > a["w1"] for a, b in zip(order, order[1:])),
        "w1": [r["w1"] for r in order],
    }


def _exp_audit_decomposition(cfg, manifest, out_dir):
    p = cfg.params
    rows = []
    all_ok = True
    exact_zero = True
    problem = build_problem(cfg.problem)
    linear = cfg.h.get("kind", "linear") in ("linear", "constant")
    x0 = np.broadcast_to(np.asarray(cfg.initial_state, dtype=float), (problem.dim,)).copy()
    for m, eta in _chain_points(cfg):
        t0 = time.perf_counter()
        seed = _point_seed(cfg.seed, f"m={m}|eta={eta!r}")
        burn = _resolve_burn_in(cfg.burn_in, eta)
        entry = _point_entry(m, eta, cfg.delta, seed, burn)
        manifest.points.append(entry)
        keep = p["audit_trajectories"] if cfg.audit else 0
        tasks = [
            (cfg.problem, cfg.h, m, eta, cfg.delta, burn, seed, lo, hi, x0, keep)
            for lo, hi in _blocks(cfg.replications, cfg.block_size)
        ]
        parts = _map(_audit_block, tasks, cfg.workers)
        _check_divergence(np.concatenate([q["diverged"] for q in parts]), f"m={m}", manifest.divergences)
        results = [r for q in parts for r in q["results"] if r is not None]
        saved = [t for q in parts for t in q["trajectories"]]
        if saved:
            (out_dir / "trajectories").mkdir(exist_ok=True)
        for idx, traj in saved:
            save_trajectory(traj, out_dir / "trajectories" / f"m{m}_rep{idx}.npy", audit=True)
        h_vals = np.array([r.h_eta for r in results])
        y_vals = np.array([r.y_eta for r in results])
        for r in results:
            rec = r.to_record()
            rec.update({"m": m, "eta": eta, "delta": cfg.delta, "regime": entry["regime"], "seed": seed})
            rows.append(rec)
            lhs = rec["lhs"]
            all_ok &= rec["identity_residual"] <= p["identity_tol"] * (1 + abs(lhs))
            if linear:
                exact_zero &= rec["R3"] == 0.0 and rec["R4"] == 0.0
        n = h_vals.size
        summary = {"n": n, "mean_h": float(h_vals.mean()), "mean_y": float(y_vals.mean())}
        if n > 1:
            var_h = float(h_vals.var(ddof=1))
            # standard error of a sample variance via the fourth central moment
            mu4 = float(np.mean((h_vals - h_vals.mean()) ** 4))
            se_var = math.sqrt(max(mu4 - var_h**2, 0.0) / n)
            se_y = float(y_vals.std(ddof=1) / math.sqrt(n))
            summary.update(
                {
                    "se_mean_h": float(h_vals.std(ddof=1) / math.sqrt(n)),
                    "var_h": var_h,
                    "se_var_h": se_var,
                    "se_mean_y": se_y,
                }
            )
        manifest.summary[f"m={m}"] = summary
        manifest.timings[f"m={m}"] = time.perf_counter() - t0
    cols = [
        "index", "m", "eta", "delta", "regime", "seed", "pi_hat_h", "y_eta", "w_eta", "h_eta",
        "R1", "R2", "R3", "R4", "r_residual", "lhs", "identity_residual", "increment_mismatch",
    ]
    manifest.artifacts.append(str(emit_csv(rows, out_dir / "audit-decomposition.csv", cols)))
    manifest.checks["decomposition_identity"] = {"pass": bool(all_ok), "tol": p["identity_tol"]}
    if linear:
        manifest.checks["hessian_terms_zero"] = {"pass": bool(exact_zero)}
    k = p["n_se"]
    for key, s in manifest.summary.items():
        if s["n"] < 2:
            continue
        mean_ok = abs(s["mean_h"]) <= k * s["se_mean_h"]
        combined = math.hypot(s["se_var_h"], s["se_mean_y"])
        var_ok = abs(s["var_h"] - s["mean_y"]) <= k * combined if combined > 0 else s["var_h"] == s["mean_y"]
        manifest.checks[f"martingale_moments[{key}]"] = {
            "pass": bool(mean_ok and var_ok),
            "mean_h": s["mean_h"],
            "var_h": s["var_h"],
            "mean_y": s["mean_y"],
            "n_se": k,
        }


def _exp_audit_assumptions(cfg, manifest, out_dir):
    p = cfg.params
    problem = build_problem(cfg.problem)
    c = problem.constants
    rows = []

    def run(label, constants, cap, expected):
        reports = [
            check_lipschitz(problem, p["n_pairs"], p["radius"], cfg.seed, constants),
            check_dissipativity(problem, p["n_pairs"], p["radius"], cfg.seed, constants),
            check_subgaussian(problem, p["gamma"], p["n_samples"], None, cfg.seed, cap, p["radius"]),
        ]
        for rep in reports:
            rec = rep.to_record()
            rec.update({"constants": label, "L": constants.L, "K1": constants.K1, "K2": constants.K2, "cap": cap})
            rec["expected"] = expected
            rec["as_expected"] = rec["pass"] == expected
            rows.append(rec)

    run("declared", c, p["cap"], True)
    if p["negative_controls"]:
        run("wrong", AssumptionConstants(L=c.L / 2, K1=2 * c.K1, K2=0.0), 1.0, False)
    cols = ["check", "constants", "L", "K1", "K2", "cap", "pass", "expected", "as_expected", "worst_value", "n_samples", "radius", "seed"]
    manifest.artifacts.append(str(emit_csv(rows, out_dir / "audit-assumptions.csv", cols)))
    manifest.checks["validators"] = {"pass": all(r["as_expected"] for r in rows)}


def _exp_stein_check(cfg, manifest, out_dir):
    p = cfg.params
    problem = build_problem(cfg.problem)
    h = TestFunction.from_spec(cfg.h, problem.dim)
    eta = resolve_eta(cfg.eta, cfg.m[0])
    if problem.analytic is None:
        raise ConfigurationError("stein-check compares against the closed form; use gaussian_mean")
    exact = problem.analytic.stein(h, eta, cfg.delta)
    rows = []
    ok = True
    for i, x in enumerate(p["points"]):
        x = np.broadcast_to(np.asarray(x, dtype=float), (problem.dim,)).copy()
        est, se = stein_f_mc(
            problem, h, x, p["T"], p["dt"], p["n_paths"], exact.pi_h,
            derive_stream(cfg.seed, i, "stein"), eta, cfg.delta,
        )
        ref = float(exact.f(x))
        err = abs(est - ref)
        ok &= err <= p["tol"]
        rows.append({"x": float(x[0]), "f_mc": est, "stderr": se, "f_exact": ref, "abs_error": err, "pass": err <= p["tol"]})
    pts = derive_stream(cfg.seed, 0, "residual-points").uniform(-5, 5, (p["residual_points"], problem.dim))
    res = stein_residual_check(exact, problem, eta, cfg.delta, pts)
    manifest.artifacts.append(str(emit_csv(rows, out_dir / "stein-check.csv", ["x", "f_mc", "stderr", "f_exact", "abs_error", "pass"])))
    manifest.checks["stein_mc_vs_exact"] = {"pass": bool(ok), "tol": p["tol"]}
    manifest.checks["stein_residual"] = {"pass": res.max_residual <= p["residual_tol"], "max_residual": res.max_residual}
    manifest.points.append({"eta": eta, "delta": cfg.delta, "seed": cfg.seed})


_RUNNERS = {
    "tail-ratio": _exp_tail_ratio,
    "berry-esseen": _exp_berry_esseen,
    "w1-scan": _exp_w1_scan,
    "audit-decomposition": _exp_audit_decomposition,
    "audit-assumptions": _exp_audit_assumptions,
    "stein-check": _exp_stein_check,
}


def run_experiment(cfg: ExperimentConfig) -> RunManifest:
    """Run one experiment, write ``<out>/<experiment>.csv`` and ``<out>/manifest.json``."""
    out_dir = Path(cfg.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise HarnessError(f"cannot create output directory {out_dir}: {exc}") from exc
    manifest = RunManifest(cfg.to_dict(), cfg.config_hash(), version=_version_tag())
    t0 = time.perf_counter()
    _RUNNERS[cfg.experiment](cfg, manifest, out_dir)
    manifest.timings["total"] = time.perf_counter() - t0
    emit_json(manifest.to_dict(), out_dir / "manifest.json")
    return manifest


def apply_overrides(cfg: ExperimentConfig, seed=None, workers=None, out=None, audit=False) -> ExperimentConfig:
    """CLI flags win over ``SGLD_CMD_SEED`` / ``SGLD_CMD_WORKERS``, which win over the file."""
    env_seed = os.environ.get("SGLD_CMD_SEED")
    env_workers = os.environ.get("SGLD_CMD_WORKERS")
    changes: dict[str, Any] = {}
    try:
        if seed is not None:
            changes["seed"] = int(seed)
        elif env_seed:
            changes["seed"] = int(env_seed)
        if workers is not None:
            changes["workers"] = int(workers)
        elif env_workers:
            changes["workers"] = int(env_workers)
    except ValueError as exc:
        raise ConfigurationError(f"bad override: {exc}") from None
    if out is not None:
        changes["out"] = str(out)
    if audit:
        changes["audit"] = True
    return dataclasses.replace(cfg, **changes) if changes else cfg
