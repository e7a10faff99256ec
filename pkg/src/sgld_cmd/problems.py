"""Stochastic loss models, test functions and numerical assumption checks.

A :class:`Problem` bundles a stochastic gradient ``grad_psi(w, zeta)`` with
its mean ``grad_P`` and gradient-noise covariance ``sigma``. All built-in
callables are vectorized over leading axes: states have shape ``(..., d)``
and noise samples ``(..., r)``.

The two shipped problems are illustrative choices (no concrete loss is
prescribed by the theory):

* ``gaussian_mean``: ``psi(w, z) = |w - z|^2 / 2`` with ``z ~ N(0, s2 I)``.
  Its diffusion approximation is an Ornstein-Uhlenbeck process, so the
  stationary laws and Stein solutions are available in closed form.
* ``perturbed_quadratic``: the same loss plus ``eps * cos(w_1)``; nonconvex
  for ``eps > 0`` but still Lipschitz and dissipative.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from .errors import ConfigurationError, DiagnosticError

__all__ = [
    "AssumptionConstants",
    "OULaw",
    "Problem",
    "TestFunction",
    "ValidatorReport",
    "as_stream",
    "build_problem",
    "check_dissipativity",
    "check_lipschitz",
    "check_subgaussian",
    "make_gaussian_mean",
    "make_perturbed_quadratic",
    "make_problem",
    "sample_ball",
]

SIGMA_BUDGET = 4096
# exp() overflows a float64 just above 709.78
_EXP_CLIP = 700.0


def as_stream(stream) -> np.random.Generator:
    """Accept a Generator or an integer seed."""
    if isinstance(stream, np.random.Generator):
        return stream
    return np.random.Generator(np.random.Philox(int(stream)))


@dataclass(frozen=True)
class AssumptionConstants:
    """Declared Lipschitz (``L``) and dissipativity (``K1``, ``K2``) constants."""

    L: float
    K1: float
    K2: float = 0.0

    def __post_init__(self):
        if not (self.L > 0 and self.K1 > 0 and self.K2 >= 0):
            raise ConfigurationError(f"need L > 0, K1 > 0, K2 >= 0; got {self}")


# ---------------------------------------------------------------------------
# Test functions


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Scalar observable ``h`` evaluated along the chain.

    Kinds:
        linear: ``scale * <v, x> + offset``.
        quadratic: ``scale * |x - center|^2 + offset`` (not globally
            Lipschitz; used for Stein-solver checks only).
        constant: ``offset``.
        custom: ``scale * fn(x) + offset`` for a user-supplied vectorized ``fn``.
    """

    __test__ = False  # keep pytest from collecting this class

    kind: str
    direction: np.ndarray | None = None
    center: np.ndarray | None = None
    scale: float = 1.0
    offset: float = 0.0
    fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    base_lipschitz: float = 0.0

    @classmethod
    def linear(cls, v, normalize: bool = True, offset: float = 0.0) -> "TestFunction":
        v = np.atleast_1d(np.asarray(v, dtype=float))
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ConfigurationError("linear test function needs a nonzero direction")
        if normalize:
            v = v / norm
            norm = 1.0
        return cls("linear", direction=v, offset=float(offset), base_lipschitz=norm)

    @classmethod
    def quadratic(cls, dim: int = 1, center=None, offset: float = 0.0) -> "TestFunction":
        c = np.zeros(dim) if center is None else np.atleast_1d(np.asarray(center, dtype=float))
        return cls("quadratic", center=c, offset=float(offset), base_lipschitz=math.inf)

    @classmethod
    def constant(cls, value: float) -> "TestFunction":
        return cls("constant", offset=float(value))

    @classmethod
    def custom(cls, fn, lipschitz: float) -> "TestFunction":
        """Wrap ``fn`` and rescale it so the result is 1-Lipschitz."""
        if not lipschitz > 0:
            raise ConfigurationError("custom test function needs a positive Lipschitz constant")
        return cls("custom", fn=fn, scale=1.0 / max(1.0, lipschitz), base_lipschitz=float(lipschitz))

    @classmethod
    def from_spec(cls, spec: dict, dim: int) -> "TestFunction":
        """Build from a config mapping such as ``{"kind": "linear", "v": [1]}``."""
        spec = dict(spec)
        kind = spec.pop("kind", "linear")
        scale = float(spec.pop("scale", 1.0))
        if kind == "linear":
            v = spec.pop("v", [1.0] + [0.0] * (dim - 1))
            h = cls.linear(v, normalize=spec.pop("normalize", True), offset=spec.pop("offset", 0.0))
        elif kind == "quadratic":
            h = cls.quadratic(dim, center=spec.pop("center", None), offset=spec.pop("offset", 0.0))
        elif kind == "constant":
            h = cls.constant(spec.pop("value", spec.pop("offset", 0.0)))
        else:
            raise ConfigurationError(f"unsupported test-function kind {kind!r} in config")
        if spec:
            raise ConfigurationError(f"unknown test-function keys {sorted(spec)}")
        return dataclasses.replace(h, scale=scale) if scale != 1.0 else h

    @property
    def lipschitz(self) -> float:
        return abs(self.scale) * self.base_lipschitz

    def scaled(self, c: float) -> "TestFunction":
        """Return ``c * h``."""
        return dataclasses.replace(self, scale=self.scale * c, offset=self.offset * c)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "linear":
            return self.scale * (x @ self.direction) + self.offset
        if self.kind == "quadratic":
            diff = x - self.center
            return self.scale * np.einsum("...i,...i->...", diff, diff) + self.offset
        if self.kind == "constant":
            return np.full(x.shape[:-1], self.offset)
        return self.scale * np.asarray(self.fn(x)) + self.offset

    def to_spec(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.offset}
        if self.kind == "custom":
            raise ConfigurationError("custom test functions cannot be serialised")
        out: dict[str, Any] = {"kind": self.kind, "scale": self.scale, "offset": self.offset}
        if self.direction is not None:
            out["v"] = self.direction.tolist()
            out["normalize"] = False
        if self.center is not None:
            out["center"] = self.center.tolist()
        return out


# ---------------------------------------------------------------------------
# Problems


@dataclass(frozen=True)
class OULaw:
    """Closed forms for ``gaussian_mean``.

    With ``a = eta * s2 + delta`` the approximating SDE is
    ``dX = -X dt + sqrt(a) dB`` whose invariant law is ``N(0, a/2 I)``; the
    SGLD chain itself is a Gaussian AR(1) with stationary variance
    ``a / (2 - eta)``.
    """

    dim: int
    sigma2: float

    def diffusion(self, eta: float, delta: float) -> float:
        return eta * self.sigma2 + delta

    def sde_stationary_var(self, eta: float, delta: float) -> float:
        return self.diffusion(eta, delta) / 2.0

    def chain_stationary_var(self, eta: float, delta: float) -> float:
        return self.diffusion(eta, delta) / (2.0 - eta)

    def sample_sde_stationary(self, stream, n: int, eta: float, delta: float) -> np.ndarray:
        sd = math.sqrt(self.sde_stationary_var(eta, delta))
        return sd * as_stream(stream).standard_normal((n, self.dim))

    def sample_chain_stationary(self, stream, n: int, eta: float, delta: float) -> np.ndarray:
        sd = math.sqrt(self.chain_stationary_var(eta, delta))
        return sd * as_stream(stream).standard_normal((n, self.dim))

    def pi_h(self, h: TestFunction, eta: float, delta: float) -> float:
        if h.kind in ("linear", "constant"):
            return h.offset
        if h.kind == "quadratic":
            v = self.sde_stationary_var(eta, delta)
            return h.scale * (float(h.center @ h.center) + self.dim * v) + h.offset
        raise ConfigurationError(f"no closed-form stationary mean for {h.kind!r} test functions")

    def stein(self, h: TestFunction, eta: float, delta: float):
        from .stein import analytic_stein_ou

        return analytic_stein_ou(h, self.diffusion(eta, delta), dim=self.dim)


@dataclass(frozen=True)
class Problem:
    """A stochastic loss model and its derived objects.

    Attributes:
        name: registry name (``custom`` for user-built problems).
        dim: state dimension ``d``.
        zeta_dim: noise dimension ``r``.
        sample_zeta: ``(stream, size) -> (*size, r)`` draws from the data law.
        grad_psi: stochastic gradient, ``(w, zeta) -> (..., d)``.
        grad_P: mean gradient, ``w -> (..., d)``.
        sigma: gradient-noise covariance, ``w -> (..., d, d)``.
        constants: declared assumption constants.
        params: constructor parameters, enough to rebuild in a worker process.
        sigma_constant: ``sigma`` when it does not depend on the state.
        analytic: closed forms, if any.
    """

    name: str
    dim: int
    zeta_dim: int
    sample_zeta: Callable[..., np.ndarray] = field(compare=False)
    grad_psi: Callable[..., np.ndarray] = field(compare=False)
    grad_P: Callable[..., np.ndarray] = field(compare=False)
    sigma: Callable[..., np.ndarray] = field(compare=False)
    constants: AssumptionConstants
    params: dict = field(default_factory=dict)
    sigma_constant: np.ndarray | None = field(default=None, compare=False)
    analytic: OULaw | None = None

    def diffusion_matrix(self, w, eta: float, delta: float) -> np.ndarray:
        """``eta * Sigma(w) + delta * I``, the squared diffusion coefficient."""
        s = self.sigma_constant if self.sigma_constant is not None else self.sigma(w)
        return eta * s + delta * np.eye(self.dim)

    def spec(self) -> dict:
        return {"name": self.name, **self.params}


def _check_dim(d) -> int:
    if int(d) != d or d < 1:
        raise ConfigurationError(f"dimension must be a positive integer, got {d!r}")
    return int(d)


def make_gaussian_mean(d: int = 1, sigma2: float = 1.0) -> Problem:
    """Quadratic loss around Gaussian data: ``grad_psi = w - zeta``, ``grad_P = w``."""
    d = _check_dim(d)
    if not sigma2 >= 0:
        raise ConfigurationError(f"sigma2 must be nonnegative, got {sigma2!r}")
    sd = math.sqrt(sigma2)
    sig = sigma2 * np.eye(d)

    def sample_zeta(stream, size=None):
        shape = (d,) if size is None else (*np.atleast_1d(size), d)
        return sd * stream.standard_normal(shape)

    def grad_psi(w, zeta):
        return np.asarray(w, dtype=float) - zeta

    def grad_P(w):
        return np.array(w, dtype=float, copy=True)

    def sigma(w):
        w = np.asarray(w, dtype=float)
        return np.broadcast_to(sig, (*w.shape[:-1], d, d)).copy()

    return Problem(
        name="gaussian_mean",
        dim=d,
        zeta_dim=d,
        sample_zeta=sample_zeta,
        grad_psi=grad_psi,
        grad_P=grad_P,
        sigma=sigma,
        constants=AssumptionConstants(L=1.0, K1=1.0, K2=0.0),
        params={"d": d, "sigma2": float(sigma2)},
        sigma_constant=sig,
        analytic=OULaw(d, float(sigma2)),
    )


def make_perturbed_quadratic(d: int = 1, epsilon: float = 0.1, sigma2: float = 1.0) -> Problem:
    """``psi = |w - zeta|^2 / 2 + epsilon * cos(w_1)``, nonconvex for ``epsilon > 0``.

    The perturbation is deterministic, so ``Sigma = sigma2 * I`` as for the
    unperturbed model. Declared constants are ``L = 1 + epsilon``,
    ``K1 = 1/2`` and ``K2 = 2 epsilon^2``.
    """
    d = _check_dim(d)
    if not 0.0 <= epsilon < 0.5:
        raise ConfigurationError(f"epsilon must lie in [0, 1/2), got {epsilon!r}")
    if not sigma2 > 0:
        raise ConfigurationError(f"sigma2 must be positive, got {sigma2!r}")
    sd = math.sqrt(sigma2)
    sig = sigma2 * np.eye(d)

    def _bump(w):
        out = np.zeros_like(w)
        out[..., 0] = epsilon * np.sin(w[..., 0])
        return out

    def sample_zeta(stream, size=None):
        shape = (d,) if size is None else (*np.atleast_1d(size), d)
        return sd * stream.standard_normal(shape)

    def grad_psi(w, zeta):
        w = np.asarray(w, dtype=float)
        return w - zeta - _bump(w)

    def grad_P(w):
        w = np.asarray(w, dtype=float)
        return w - _bump(w)

    def sigma(w):
        w = np.asarray(w, dtype=float)
        return np.broadcast_to(sig, (*w.shape[:-1], d, d)).copy()

    return Problem(
        name="perturbed_quadratic",
        dim=d,
        zeta_dim=d,
        sample_zeta=sample_zeta,
        grad_psi=grad_psi,
        grad_P=grad_P,
        sigma=sigma,
        constants=AssumptionConstants(L=1.0 + epsilon, K1=0.5, K2=2.0 * epsilon**2),
        params={"d": d, "epsilon": float(epsilon), "sigma2": float(sigma2)},
        sigma_constant=sig,
    )


def make_problem(
    dim: int,
    zeta_dim: int,
    sample_zeta,
    grad_psi,
    constants: AssumptionConstants,
    grad_P=None,
    sigma=None,
    budget: int = SIGMA_BUDGET,
    seed: int = 0,
    name: str = "custom",
) -> Problem:
    """Assemble a problem from user callables.

    Missing ``grad_P`` / ``sigma`` are Monte Carlo estimates over a fixed set
    of ``budget`` noise draws, so they are deterministic functions of the
    state. The covariance estimate is symmetrized and its spectrum clipped at
    zero.
    """
    dim = _check_dim(dim)
    zeta_dim = _check_dim(zeta_dim)
    if budget < 2:
        raise ConfigurationError("Monte Carlo budget must be at least 2")
    draws = None
    if grad_P is None or sigma is None:
        draws = np.asarray(sample_zeta(as_stream(seed), budget), dtype=float).reshape(budget, zeta_dim)

    def _samples(w):
        w = np.asarray(w, dtype=float)
        return np.asarray(grad_psi(w[..., None, :], draws))

    if grad_P is None:

        def grad_P(w):
            return _samples(w).mean(axis=-2)

    if sigma is None:

        def sigma(w):
            g = _samples(w)
            centered = g - g.mean(axis=-2, keepdims=True)
            a = np.einsum("...ki,...kj->...ij", centered, centered) / budget
            a = 0.5 * (a + np.swapaxes(a, -1, -2))
            lam, vec = np.linalg.eigh(a)
            return (vec * np.clip(lam, 0.0, None)[..., None, :]) @ np.swapaxes(vec, -1, -2)

    return Problem(
        name=name,
        dim=dim,
        zeta_dim=zeta_dim,
        sample_zeta=sample_zeta,
        grad_psi=grad_psi,
        grad_P=grad_P,
        sigma=sigma,
        constants=constants,
        params={"budget": budget, "seed": seed},
    )


_REGISTRY = {
    "gaussian_mean": make_gaussian_mean,
    "perturbed_quadratic": make_perturbed_quadratic,
}


def build_problem(spec: dict) -> Problem:
    """Instantiate a registered problem from ``{"name": ..., **params}``."""
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in _REGISTRY:
        raise ConfigurationError(f"unknown problem {name!r}; choose from {sorted(_REGISTRY)}")
    try:
        return _REGISTRY[name](**spec)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {name}: {exc}") from None


# ---------------------------------------------------------------------------
# Assumption validators


@dataclass
class ValidatorReport:
    check: str
    passed: bool
    worst_value: float
    n_samples: int
    radius: float | None
    seed: int | None
    details: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "check": self.check,
            "pass": bool(self.passed),
            "worst_value": float(self.worst_value),
            "n_samples": int(self.n_samples),
            "radius": self.radius,
            "seed": self.seed,
        }


def sample_ball(stream, n: int, d: int, radius: float) -> np.ndarray:
    """Uniform draws from the closed ball of the given radius."""
    g = as_stream(stream)
    direction = g.standard_normal((n, d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * g.random(n) ** (1.0 / d)
    return direction * r[:, None]


def _triples(problem: Problem, n_pairs: int, radius: float, stream):
    if n_pairs < 1:
        raise ConfigurationError("n_pairs must be at least 1")
    g = as_stream(stream)
    x = sample_ball(g, n_pairs, problem.dim, radius)
    y = sample_ball(g, n_pairs, problem.dim, radius)
    z = np.asarray(problem.sample_zeta(g, n_pairs)).reshape(n_pairs, problem.zeta_dim)
    return x, y, z


def _seed_of(stream):
    return None if isinstance(stream, np.random.Generator) else int(stream)


def check_lipschitz(
    problem: Problem,
    n_pairs: int = 10_000,
    radius: float = 10.0,
    stream=0,
    constants: AssumptionConstants | None = None,
) -> ValidatorReport:
    """Largest observed ``|grad_psi(x,z) - grad_psi(y,z)| / |x - y|`` vs. declared ``L``."""
    c = constants or problem.constants
    x, y, z = _triples(problem, n_pairs, radius, stream)
    dist = np.linalg.norm(x - y, axis=1)
    keep = dist > 0
    if not keep.any():
        raise DiagnosticError("every sampled pair was degenerate (x == y)")
    diff = np.linalg.norm(problem.grad_psi(x[keep], z[keep]) - problem.grad_psi(y[keep], z[keep]), axis=1)
    worst = float(np.max(diff / dist[keep]))
    return ValidatorReport(
        "lipschitz",
        worst <= c.L * (1 + 1e-9),
        worst,
        int(keep.sum()),
        radius,
        _seed_of(stream),
        {"declared_L": c.L},
    )


def check_dissipativity(
    problem: Problem,
    n_pairs: int = 10_000,
    radius: float = 10.0,
    stream=0,
    constants: AssumptionConstants | None = None,
    tol: float = 1e-9,
) -> ValidatorReport:
    """Largest ``<x-y, -grad_psi(x,z) + grad_psi(y,z)> + K1|x-y|^2 - K2`` over sampled triples.

    Passes when it stays below ``tol * (1 + |x-y|^2)``; the reported worst
    value is the raw maximum.
    """
    c = constants or problem.constants
    x, y, z = _triples(problem, n_pairs, radius, stream)
    u = x - y
    sq = np.einsum("ij,ij->i", u, u)
    keep = sq > 0
    if not keep.any():
        raise DiagnosticError("every sampled pair was degenerate (x == y)")
    u, sq = u[keep], sq[keep]
    drift = -problem.grad_psi(x[keep], z[keep]) + problem.grad_psi(y[keep], z[keep])
    excess = np.einsum("ij,ij->i", u, drift) + c.K1 * sq - c.K2
    return ValidatorReport(
        "dissipativity",
        bool(np.all(excess <= tol * (1 + sq))),
        float(excess.max()),
        int(keep.sum()),
        radius,
        _seed_of(stream),
        {"declared_K1": c.K1, "declared_K2": c.K2},
    )


def check_subgaussian(
    problem: Problem,
    gamma: float = 0.05,
    n_samples: int = 100_000,
    grid=None,
    stream=0,
    cap: float = 1e3,
    radius: float = 10.0,
) -> ValidatorReport:
    """Monte Carlo ``E exp(gamma |grad_psi(x, zeta)|^2)`` at each grid point.

    The default grid is five points on the first axis spanning
    ``[-radius, radius]``. Exponents above 700 are clipped and counted; any
    clipping fails the check with ``gamma_too_large`` set, since the estimate
    is then meaningless.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be nonnegative")
    if grid is None:
        grid = np.zeros((5, problem.dim))
        grid[:, 0] = np.linspace(-radius, radius, 5)
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    g = as_stream(stream)
    estimates, stderrs, clipped = [], [], 0
    for x in grid:
        z = np.asarray(problem.sample_zeta(g, n_samples)).reshape(n_samples, problem.zeta_dim)
        grad = problem.grad_psi(np.broadcast_to(x, (n_samples, problem.dim)), z)
        expo = gamma * np.einsum("ij,ij->i", grad, grad)
        over = expo > _EXP_CLIP
        clipped += int(over.sum())
        vals = np.exp(np.minimum(expo, _EXP_CLIP))
        estimates.append(float(vals.mean()))
        stderrs.append(float(vals.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0)
    est = np.array(estimates)
    frac = clipped / (n_samples * len(grid))
    worst = float(est.max())
    passed = bool(np.all(np.isfinite(est)) and worst <= cap and clipped == 0)
    return ValidatorReport(
        "subgaussian",
        passed,
        worst,
        n_samples * len(grid),
        radius,
        _seed_of(stream),
        {
            "gamma": gamma,
            "cap": cap,
            "estimates": estimates,
            "stderr": stderrs,
            "clipped_fraction": frac,
            "gamma_too_large": clipped > 0,
        },
    )
