"""Chain statistics: empirical averages, the self-normalized statistic,
the martingale/remainder decomposition, tail ratios and distances.

Functions taking a ``trajectory`` accept a :class:`~sgld_cmd.dynamics.Trajectory`
or a bare ``(m, d)`` state array where no noise log is needed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import special

from .dynamics import Trajectory
from .errors import ConfigurationError, DegenerateStatisticError, DiagnosticError
from .problems import Problem, TestFunction
from .stein import SteinField

__all__ = [
    "DistanceReport",
    "ExpMomentCurve",
    "RComponents",
    "ReplicationResult",
    "TailTable",
    "decomposition_audit",
    "exp_moment_at",
    "exp_moment_curve",
    "h_eta",
    "ks_distance",
    "normal_cdf",
    "normal_sf",
    "pi_hat",
    "r_components",
    "r_residual",
    "tail_ratio_table",
    "variance_concentration_check",
    "w1_sorted",
    "w_eta",
    "y_eta",
]

_SQRT2 = math.sqrt(2.0)
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)
# shift Gauss-Legendre from [-1, 1] to [0, 1]
_GL_NODES = 0.5 * (_GL_NODES + 1.0)
_GL_WEIGHTS = 0.5 * _GL_WEIGHTS


def normal_cdf(x):
    return 0.5 * special.erfc(-np.asarray(x, dtype=float) / _SQRT2)


def normal_sf(x):
    """``1 - Phi(x)`` without cancellation in the upper tail."""
    return 0.5 * special.erfc(np.asarray(x, dtype=float) / _SQRT2)


def _states(trajectory) -> np.ndarray:
    s = trajectory.states if isinstance(trajectory, Trajectory) else np.asarray(trajectory, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if len(s) == 0:
        raise DiagnosticError("empty trajectory")
    return s


def _noise(trajectory):
    if not isinstance(trajectory, Trajectory) or not trajectory.has_noise_log:
        raise DiagnosticError("this statistic needs a trajectory recorded with its noise log")
    return trajectory.zeta, trajectory.xi


# ---------------------------------------------------------------------------
# Empirical measure and self-normalized statistic


def pi_hat(trajectory, h: TestFunction) -> float:
    """Time average ``(1/m) sum_k h(w_k)``."""
    return float(np.mean(h(_states(trajectory))))


def y_eta(trajectory, stein_field: SteinField) -> float:
    """Random normalizer ``(1/m) sum_k |grad f(w_k)|^2``."""
    g = stein_field.grad_f(_states(trajectory))
    return float(np.mean(np.einsum("...i,...i->...", g, g)))


def w_eta(trajectory, h: TestFunction, stein_field: SteinField, pi_h: float, eta: float, delta: float) -> float:
    """``sqrt(m eta) (Pi(h) - pi(h)) / sqrt(delta Y)``."""
    s = _states(trajectory)
    y = y_eta(s, stein_field)
    if y <= 0.0:
        raise DegenerateStatisticError("normalizer Y is zero")
    return math.sqrt(len(s) * eta) * (pi_hat(s, h) - pi_h) / math.sqrt(delta * y)


# ---------------------------------------------------------------------------
# Martingale / remainder decomposition


class RComponents(NamedTuple):
    R1: float
    R2: float
    R3: float
    R4: float

    @property
    def remainder(self) -> float:
        return -(self.R1 + self.R2 + self.R3 + self.R4)


def h_eta(trajectory: Trajectory, stein_field: SteinField) -> float:
    """Martingale term ``-(1/sqrt m) sum_k <grad f(w_k), xi_{k+1}>``."""
    _, xi = _noise(trajectory)
    g = stein_field.grad_f(trajectory.states)
    return -float(np.einsum("ki,ki->", g, xi)) / math.sqrt(trajectory.m)


def _increments(trajectory: Trajectory, problem: Problem, eta: float, delta: float) -> np.ndarray:
    zeta, xi = _noise(trajectory)
    return -eta * problem.grad_psi(trajectory.states, zeta) + math.sqrt(eta * delta) * xi


def r_components(trajectory: Trajectory, stein_field: SteinField, problem: Problem, eta: float, delta: float) -> RComponents:
    """The four remainder terms, signed so that the remainder is ``-(R1+R2+R3+R4)``.

    With ``D_k = -eta grad_psi(w_k, z_{k+1}) + sqrt(eta delta) xi_{k+1}`` and
    ``c = 1 / sqrt(m eta delta)``:

    * ``R1 = c (f(w_0) - f(w_m))``
    * ``R2 = sqrt(eta / (m delta)) sum <grad f(w_k), grad_P(w_k) - grad_psi(w_k, z_{k+1})>``
    * ``R3 = c sum int_0^1 int_0^1 s <hess f(w_k + s s' D_k) - hess f(w_k), D_k D_k^T> ds' ds``
      (8x8 Gauss-Legendre)
    * ``R4 = c/2 sum <hess f(w_k), D_k D_k^T - eta^2 Sigma(w_k) - eta delta I>``
    """
    zeta, _ = _noise(trajectory)
    if not stein_field.has_hessian:
        raise ConfigurationError("R3/R4 need a field with a Hessian; use r_residual instead")
    w = trajectory.states
    m = trajectory.m
    c = 1.0 / math.sqrt(m * eta * delta)
    r1 = c * float(stein_field.f(w[0]) - stein_field.f(trajectory.final_state))

    grad = stein_field.grad_f(w)
    noise_bias = problem.grad_P(w) - problem.grad_psi(w, zeta)
    r2 = math.sqrt(eta) / (math.sqrt(m) * math.sqrt(delta)) * float(np.einsum("ki,ki->", grad, noise_bias))

    dw = _increments(trajectory, problem, eta, delta)
    outer = np.einsum("ki,kj->kij", dw, dw)
    hess0 = stein_field.hess_f(w)
    r3 = 0.0
    for s, ws in zip(_GL_NODES, _GL_WEIGHTS):
        for sp, wsp in zip(_GL_NODES, _GL_WEIGHTS):
            dh = stein_field.hess_f(w + (s * sp) * dw) - hess0
            r3 += ws * wsp * s * float(np.einsum("kij,kij->", dh, outer))
    r3 = float(c * r3)

    expected = problem.diffusion_matrix(w, eta * eta, eta * delta)
    r4 = 0.5 * c * float(np.einsum("kij,kij->", hess0, outer - expected))
    return RComponents(r1, r2, r3, r4)


def r_residual(trajectory: Trajectory, h: TestFunction, stein_field: SteinField, pi_h: float, eta: float, delta: float) -> float:
    """Remainder by subtraction: ``sqrt(m eta / delta) (Pi(h) - pi(h)) - H``."""
    _noise(trajectory)
    lhs = math.sqrt(trajectory.m * eta / delta) * (pi_hat(trajectory, h) - pi_h)
    return lhs - h_eta(trajectory, stein_field)


@dataclass
class ReplicationResult:
    """Per-replication statistics of one chain."""

    index: int
    pi_hat_h: float
    y_eta: float
    w_eta: float
    h_eta: float | None = None
    r_components: RComponents | None = None
    r_residual: float | None = None
    identity_residual: float | None = None
    diagnostics: dict = field(default_factory=dict)
    seed: int | None = None
    config_hash: str | None = None

    def to_record(self) -> dict:
        rec = {k: v for k, v in asdict(self).items() if k not in ("r_components", "diagnostics")}
        if self.r_components is not None:
            rec.update({f"R{i + 1}": v for i, v in enumerate(self.r_components)})
        rec.update(self.diagnostics)
        return rec


def decomposition_audit(
    trajectory: Trajectory,
    h: TestFunction,
    stein_field: SteinField,
    problem: Problem,
    pi_h: float,
    eta: float,
    delta: float,
    index: int = 0,
) -> ReplicationResult:
    """All statistics of one chain plus the closure of the decomposition identity.

    ``identity_residual`` is ``|sqrt(m eta/delta)(Pi(h) - pi(h)) - H + sum R_i|``.
    When the field has no Hessian only the residual form is filled in.
    """
    m = trajectory.m
    lhs = math.sqrt(m * eta / delta) * (pi_hat(trajectory, h) - pi_h)
    y = y_eta(trajectory, stein_field)
    mart = h_eta(trajectory, stein_field)
    comps = None
    ident = None
    if stein_field.has_hessian:
        comps = r_components(trajectory, stein_field, problem, eta, delta)
        ident = float(abs(lhs - mart + sum(comps)))
    dw = _increments(trajectory, problem, eta, delta)
    replay = float(np.abs(np.diff(trajectory.path(), axis=0) - dw).max())
    return ReplicationResult(
        index=index,
        pi_hat_h=pi_hat(trajectory, h),
        y_eta=y,
        w_eta=lhs / math.sqrt(y) if y > 0 else math.nan,
        h_eta=mart,
        r_components=comps,
        r_residual=lhs - mart,
        identity_residual=ident,
        diagnostics={"lhs": lhs, "increment_mismatch": replay},
    )


# ---------------------------------------------------------------------------
# Tail ratios and distances


@dataclass
class TailTable:
    x: np.ndarray
    p_hat: np.ndarray
    normal_tail: np.ndarray
    ratio: np.ndarray
    stderr: np.ndarray
    n: int
    regime: str | None = None
    note: str | None = None
    side: str = "+"
    mirrored: "TailTable | None" = None

    def rows(self) -> list[dict]:
        return [
            {
                "side": self.side,
                "x": float(x),
                "p_hat": float(p),
                "normal_tail": float(q),
                "ratio": float(r),
                "stderr": float(s),
                "regime": self.regime,
            }
            for x, p, q, r, s in zip(self.x, self.p_hat, self.normal_tail, self.ratio, self.stderr)
        ]

    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.ratio - 1.0)))


def _one_sided(w, x, side, regime, note):
    p = np.array([np.count_nonzero(w > xi) for xi in x]) / w.size
    q = normal_sf(x)
    return TailTable(x, p, q, p / q, np.sqrt(p * (1 - p) / w.size) / q, w.size, regime, note, side)


def tail_ratio_table(w_samples, x_grid, regime: str | None = None, note: str | None = None) -> TailTable:
    """``P(W > x) / (1 - Phi(x))`` with binomial errors; ``.mirrored`` holds the table for ``-W``."""
    w = np.asarray(w_samples, dtype=float).ravel()
    x = np.asarray(x_grid, dtype=float).ravel()
    if w.size == 0 or x.size == 0:
        raise DiagnosticError("tail table needs samples and a nonempty grid")
    if w.size < 1000:
        warnings.warn(f"only {w.size} samples; tail ratios will be noisy", RuntimeWarning)
    table = _one_sided(w, x, "+", regime, note)
    table.mirrored = _one_sided(-w, x, "-", regime, note)
    return table


def ks_distance(samples) -> float:
    """Exact ``sup_x |F_R(x) - Phi(x)|`` for the empirical CDF ``F_R``."""
    s = np.sort(np.asarray(samples, dtype=float).ravel())
    r = s.size
    if r == 0:
        raise DiagnosticError("no samples")
    phi = normal_cdf(s)
    i = np.arange(1, r + 1)
    return float(max(np.max(i / r - phi), np.max(phi - (i - 1) / r)))


def w1_sorted(samples_a, samples_b, direction=None) -> float:
    """1-D Wasserstein-1 distance between two empirical measures.

    Equal sizes use the sorted-sample average ``(1/n) sum |a_(i) - b_(i)|``;
    unequal sizes fall back to the exact quantile-function integral. For
    ``d > 1`` pass ``direction`` to project onto.
    """
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if direction is not None:
        a, b = a @ np.asarray(direction, dtype=float), b @ np.asarray(direction, dtype=float)
    if a.ndim > 1 and a.shape[-1] == 1:
        a, b = a[..., 0], b[..., 0]
    a, b = a.ravel(), b.ravel()
    if a.size == 0 or b.size == 0:
        raise DiagnosticError("empty sample")
    if a.size != b.size:
        from scipy.stats import wasserstein_distance

        return float(wasserstein_distance(a, b))
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


@dataclass
class DistanceReport:
    kind: str
    value: float
    reference: float | None = None
    stderr: float | None = None
    n: int | None = None
    m: int | None = None
    eta: float | None = None
    delta: float | None = None
    regime: str | None = None

    def to_record(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Diagnostics


@dataclass
class ExpMomentCurve:
    k: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    slope: float
    slope_stderr: float
    overflow: bool

    @property
    def trend_free(self) -> bool:
        """Fitted slope within three of its standard errors of zero."""
        if self.slope_stderr == 0.0:
            return abs(self.slope) <= 1e-12
        return abs(self.slope) <= 3.0 * self.slope_stderr


def exp_moment_at(states_at_k, k, gamma: float) -> ExpMomentCurve:
    """``E exp(gamma |w_k|^2)`` across replications at given checkpoints.

    ``states_at_k`` has shape ``(R, K, d)``. A weighted least-squares line
    through the estimates gives the trend diagnostic.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be nonnegative")
    s = np.asarray(states_at_k, dtype=float)
    expo = gamma * np.einsum("rki,rki->rk", s, s)
    overflow = bool(np.any(expo > 700.0))
    vals = np.exp(np.minimum(expo, 700.0))
    n = vals.shape[0]
    est = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(est)
    k = np.asarray(k, dtype=float)
    if np.all(se > 0):
        w = 1.0 / se**2
    else:
        w = np.ones_like(est)
    kbar = np.sum(w * k) / np.sum(w)
    sxx = np.sum(w * (k - kbar) ** 2)
    slope = float(np.sum(w * (k - kbar) * est) / sxx)
    slope_se = float(math.sqrt(1.0 / sxx)) if np.all(se > 0) else 0.0
    return ExpMomentCurve(k, est, se, slope, slope_se, overflow)


def checkpoints(m: int) -> list[int]:
    return sorted({0, m // 4, m // 2, (3 * m) // 4, m - 1})


def exp_moment_curve(trajectories, gamma: float, ks: Sequence[int] | None = None) -> ExpMomentCurve:
    """Exponential-moment curve over replicated trajectories (list or ``(R, m, d)`` array)."""
    if isinstance(trajectories, np.ndarray):
        arr = trajectories if trajectories.ndim == 3 else trajectories[..., None]
    else:
        arr = np.stack([_states(t) for t in trajectories])
    ks = checkpoints(arr.shape[1]) if ks is None else list(ks)
    return exp_moment_at(arr[:, ks], ks, gamma)


def variance_concentration_check(trajectories, stein_field: SteinField, x_grid) -> dict:
    """Empirical ``P(|Y - mean Y| >= x')`` across replications."""
    ys = np.array([y_eta(t, stein_field) for t in trajectories])
    if ys.size < 1000:
        warnings.warn(f"only {ys.size} replications for the concentration check", RuntimeWarning)
    x = np.asarray(x_grid, dtype=float)
    dev = np.abs(ys - ys.mean())
    # identical inputs can leave rounding-level deviations
    dev[dev <= 1e-12 * max(1.0, abs(ys.mean()))] = 0.0
    exceed = np.array([np.mean(dev >= xi) if xi > 0 else 1.0 for xi in x])
    return {
        "x": x,
        "exceedance": exceed,
        "monotone": bool(np.all(np.diff(exceed) <= 0)),
        "mean_y": float(ys.mean()),
        "n": int(ys.size),
    }
