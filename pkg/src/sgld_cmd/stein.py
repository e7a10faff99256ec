"""Solutions of the Stein (Poisson) equation ``h - pi(h) = L f``.

``L g = <-grad_P, grad g> + 1/2 <eta Sigma + delta I, hess g>_HS`` is the
generator of the approximating SDE. Three backends produce a
:class:`SteinField`:

* analytic, for ``gaussian_mean`` where the SDE is Ornstein-Uhlenbeck;
* Monte Carlo, ``f(x) = -int_0^T E[h(X_t(x)) - pi(h)] dt`` over
  Euler-Maruyama paths, with central differences under common random
  numbers for derivatives;
* grid, a piecewise-linear interpolant of precomputed node values (d <= 2).
"""

from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import (
    DIVERGENCE_BOUND,
    derive_stream,
    diffusion_root,
    em_step,
    n_grid_steps,
)
from .errors import ChainDivergenceError, ConfigurationError
from .problems import Problem, TestFunction, as_stream

__all__ = [
    "GRID_FORMAT_VERSION",
    "GridField",
    "ResidualReport",
    "SteinField",
    "analytic_stein_ou",
    "default_horizon",
    "estimate_pi_h",
    "generator_apply",
    "grid_field",
    "load_grid_field",
    "mc_stein_field",
    "save_grid_field",
    "stein_f_mc",
    "stein_grad_mc",
    "stein_hessian_fd",
    "stein_residual_check",
]

GRID_FORMAT_VERSION = 1
_GRID_MAGIC = b"SGLDGRD\x00"


class SteinField:
    """Evaluable ``f``, ``grad f`` and optionally ``hess f`` for one test function.

    Callables accept a point ``(d,)`` or a stack ``(..., d)``. ``tolerance``
    is the residual the backend is expected to meet in
    :func:`stein_residual_check`.
    """

    def __init__(self, f, grad_f, hess_f=None, backend="analytic", h=None, pi_h=0.0, tolerance=1e-9, info=None):
        self._f = f
        self._grad_f = grad_f
        self._hess_f = hess_f
        self.backend = backend
        self.h = h
        self.pi_h = float(pi_h)
        self.tolerance = tolerance
        self.info = dict(info or {})

    def f(self, x):
        return self._f(np.asarray(x, dtype=float))

    def grad_f(self, x):
        return self._grad_f(np.asarray(x, dtype=float))

    @property
    def has_hessian(self) -> bool:
        return self._hess_f is not None

    def hess_f(self, x):
        if self._hess_f is None:
            raise ConfigurationError(f"{self.backend} field has no Hessian; use stein_hessian_fd")
        return self._hess_f(np.asarray(x, dtype=float))


def analytic_stein_ou(h: TestFunction, a: float, dim: int = 1) -> SteinField:
    """Closed-form Stein solution for ``dX = -X dt + sqrt(a) dB``.

    linear ``s<v,x> + b``: ``f = -s<v,x>``.
    quadratic ``s|x-c|^2 + b``: ``f = s(-|x|^2/2 + 2<c,x> + d a/4)``,
    ``grad f = s(2c - x)``, ``hess f = -s I``.
    constant: ``f = 0``.
    """
    if not a > 0:
        raise ConfigurationError("diffusion coefficient must be positive")
    s = h.scale
    eye = np.eye(dim)

    if h.kind == "linear":
        v = h.direction

        def f(x):
            return s * -(x @ v)

        def grad_f(x):
            return s * np.broadcast_to(-v, x.shape).copy()

        def hess_f(x):
            return np.zeros((*x.shape[:-1], dim, dim))

        pi_h = h.offset
    elif h.kind == "quadratic":
        c = h.center

        def f(x):
            return s * (-0.5 * np.einsum("...i,...i->...", x, x) + 2.0 * (x @ c) + dim * a / 4.0)

        def grad_f(x):
            return s * (2.0 * c - x)

        def hess_f(x):
            return s * np.broadcast_to(-eye, (*x.shape[:-1], dim, dim)).copy()

        pi_h = s * (float(c @ c) + dim * a / 2.0) + h.offset
    elif h.kind == "constant":

        def f(x):
            return np.zeros(x.shape[:-1])

        def grad_f(x):
            return np.zeros(x.shape)

        def hess_f(x):
            return np.zeros((*x.shape[:-1], dim, dim))

        pi_h = h.offset
    else:
        raise ConfigurationError(f"no analytic Stein solution for {h.kind!r} test functions")
    return SteinField(f, grad_f, hess_f, "analytic", h, pi_h, 1e-9, {"a": a})


# ---------------------------------------------------------------------------
# Monte Carlo backend


def default_horizon(problem: Problem, tail: float = 1e-5) -> float:
    """Smallest ``T`` with ``exp(-K1 T) <= tail``."""
    return math.log(1.0 / tail) / problem.constants.K1


def _path_integrals(problem, h, x, T, dt, n_paths, pi_h, stream, eta, delta, antithetic):
    """Trapezoid integrals of ``h(X_t) - pi_h`` per path (antithetic pairs averaged).

    Returns the per-unit integrals and the mean integrand on the last grid time.
    """
    if n_paths < 2:
        raise ConfigurationError("need at least 2 paths")
    if antithetic and n_paths % 2:
        raise ConfigurationError("antithetic sampling needs an even number of paths")
    n = n_grid_steps(T, dt)
    d = problem.dim
    x = np.atleast_1d(np.asarray(x, dtype=float))
    X = np.broadcast_to(x, (n_paths, d)).copy()
    half = n_paths // 2 if antithetic else n_paths
    const_q = problem.sigma_constant is not None
    q = diffusion_root(problem, X[0], eta, delta) if const_q else None
    sq = math.sqrt(dt)
    g = h(X) - pi_h
    acc = 0.5 * g
    for j in range(n):
        z = stream.standard_normal((half, d))
        if antithetic:
            z = np.concatenate([z, -z])
        if const_q:
            X = X - problem.grad_P(X) * dt + sq * (z @ q.T)
        else:
            X = em_step(X, dt, z, eta, delta, problem)
        g = h(X) - pi_h
        acc += g if j < n - 1 else 0.5 * g
    if not np.all(np.isfinite(X)) or np.abs(X).max() > DIVERGENCE_BOUND:
        raise ChainDivergenceError(n, X[np.argmax(np.abs(X).max(axis=1))], "Stein path diverged")
    per_path = acc * dt
    if antithetic:
        per_path = 0.5 * (per_path[:half] + per_path[half:])
    return per_path, float(np.mean(g))


def _resolve_pi_h(problem, h, eta, delta, pi_h):
    if pi_h is not None:
        return float(pi_h)
    if problem.analytic is not None:
        return problem.analytic.pi_h(h, eta, delta)
    raise ConfigurationError("pi_h must be supplied (see estimate_pi_h) for problems without closed forms")


def stein_f_mc(
    problem: Problem,
    h: TestFunction,
    x,
    T: float | None = None,
    dt: float = 0.01,
    n_paths: int = 100_000,
    pi_h: float | None = None,
    stream=0,
    eta: float = 0.0,
    delta: float = 1.0,
    antithetic: bool = True,
) -> tuple[float, float]:
    """Truncated-horizon Monte Carlo estimate of ``f(x)`` and its standard error.

    Antithetic pairs ``(xi, -xi)`` share one Gaussian draw; the standard
    error is computed over pair averages.
    """
    T = default_horizon(problem) if T is None else T
    pi_h = _resolve_pi_h(problem, h, eta, delta, pi_h)
    per, _ = _path_integrals(problem, h, x, T, dt, n_paths, pi_h, as_stream(stream), eta, delta, antithetic)
    se = float(per.std(ddof=1) / math.sqrt(len(per)))
    return -float(per.mean()), se


def stein_grad_mc(
    problem: Problem,
    h: TestFunction,
    x,
    eps: float = 0.05,
    T: float | None = None,
    dt: float = 0.01,
    n_paths: int = 100_000,
    pi_h: float | None = None,
    stream=0,
    eta: float = 0.0,
    delta: float = 1.0,
    antithetic: bool = True,
    return_stderr: bool = False,
):
    """Central-difference gradient of the Monte Carlo ``f`` under common random numbers.

    Every ``f(x +- eps e_i)`` evaluation restarts from the same generator
    state, so the Brownian increments are shared.
    """
    if not eps > 0:
        raise ConfigurationError("finite-difference step must be positive")
    T = default_horizon(problem) if T is None else T
    pi_h = _resolve_pi_h(problem, h, eta, delta, pi_h)
    base = as_stream(stream)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    grad = np.empty(problem.dim)
    se = np.empty(problem.dim)
    for i in range(problem.dim):
        e = np.zeros(problem.dim)
        e[i] = eps
        up, _ = _path_integrals(problem, h, x + e, T, dt, n_paths, pi_h, copy.deepcopy(base), eta, delta, antithetic)
        dn, _ = _path_integrals(problem, h, x - e, T, dt, n_paths, pi_h, copy.deepcopy(base), eta, delta, antithetic)
        diff = -(up - dn) / (2 * eps)
        grad[i] = diff.mean()
        se[i] = diff.std(ddof=1) / math.sqrt(len(diff))
    return (grad, se) if return_stderr else grad


def estimate_pi_h(
    problem: Problem,
    h: TestFunction,
    eta: float,
    delta: float,
    dt: float = 0.01,
    length: float | None = None,
    burn: float | None = None,
    stream=0,
    n_batches: int = 20,
) -> tuple[float, float]:
    """Time average of ``h`` along one long Euler-Maruyama path, with a batch-means error.

    Defaults: ``length = 1000 / K1`` time units after ``20 / K1`` of burn-in.
    """
    K1 = problem.constants.K1
    length = 1000.0 / K1 if length is None else length
    burn = 20.0 / K1 if burn is None else burn
    g = as_stream(stream)
    x = np.zeros(problem.dim)
    q = diffusion_root(problem, x, eta, delta) if problem.sigma_constant is not None else None
    nb = n_grid_steps(burn, dt)
    n = n_grid_steps(length, dt)
    n -= n % n_batches
    vals = np.empty(n)
    z = g.standard_normal((nb + n, problem.dim))
    for j in range(nb + n):
        x = em_step(x, dt, z[j], eta, delta, problem, q)
        if j >= nb:
            vals[j - nb] = h(x)
    if not np.all(np.isfinite(vals)):
        raise ChainDivergenceError(nb + n, x, "long SDE run diverged")
    means = vals.reshape(n_batches, -1).mean(axis=1)
    return float(vals.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


def mc_stein_field(
    problem: Problem,
    h: TestFunction,
    eta: float,
    delta: float,
    pi_h: float | None = None,
    T: float | None = None,
    dt: float = 0.01,
    n_paths: int = 10_000,
    seed: int = 0,
    eps_grad: float = 0.05,
    eps_hess: float = 0.05,
    tolerance: float = 0.05,
    antithetic: bool = True,
) -> SteinField:
    """Monte Carlo backed field; each evaluation replays the same seed (CRN).

    Point evaluations are cached, so finite differences reuse ``f(x)``.
    """
    T = default_horizon(problem) if T is None else T
    if pi_h is None and problem.analytic is None:
        pi_h, _ = estimate_pi_h(problem, h, eta, delta, dt, stream=derive_stream(seed, 0, "pi_h"))
    pi_h = _resolve_pi_h(problem, h, eta, delta, pi_h)
    cache: dict[tuple, float] = {}
    d = problem.dim

    def f_point(x):
        key = tuple(np.round(x, 15))
        if key not in cache:
            est, _ = stein_f_mc(
                problem, h, x, T, dt, n_paths, pi_h, derive_stream(seed, 0, "stein"), eta, delta, antithetic
            )
            cache[key] = est
        return cache[key]

    def f(x):
        flat = x.reshape(-1, d)
        return np.array([f_point(p) for p in flat]).reshape(x.shape[:-1])

    def grad_point(x):
        out = np.empty(d)
        for i in range(d):
            e = np.zeros(d)
            e[i] = eps_grad
            out[i] = (f_point(x + e) - f_point(x - e)) / (2 * eps_grad)
        return out

    def grad_f(x):
        flat = x.reshape(-1, d)
        return np.array([grad_point(p) for p in flat]).reshape(x.shape)

    fld = SteinField(
        f,
        grad_f,
        None,
        "monte-carlo",
        h,
        pi_h,
        tolerance,
        {"T": T, "dt": dt, "n_paths": n_paths, "seed": seed, "eps_hess": eps_hess},
    )
    fld.cache = cache
    return fld


def stein_hessian_fd(stein_field: SteinField, x, eps: float | None = None) -> np.ndarray:
    """Symmetrized finite-difference Hessian at one point.

    Analytic fields difference ``grad_f`` (default ``eps = 1e-3``); other
    backends take second differences of ``f`` (default ``eps = 0.05``).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = x.size
    use_grad = stein_field.backend == "analytic"
    if eps is None:
        eps = 1e-3 if use_grad else stein_field.info.get("eps_hess", 0.05)
    if not eps > 0:
        raise ConfigurationError("finite-difference step must be positive")
    H = np.empty((d, d))
    E = np.eye(d) * eps
    if use_grad:
        for i in range(d):
            H[:, i] = (stein_field.grad_f(x + E[i]) - stein_field.grad_f(x - E[i])) / (2 * eps)
    else:
        f = stein_field.f
        f0 = float(f(x))
        for i in range(d):
            H[i, i] = (float(f(x + E[i])) - 2 * f0 + float(f(x - E[i]))) / eps**2
            for j in range(i + 1, d):
                H[i, j] = (
                    float(f(x + E[i] + E[j]))
                    - float(f(x + E[i] - E[j]))
                    - float(f(x - E[i] + E[j]))
                    + float(f(x - E[i] - E[j]))
                ) / (4 * eps**2)
                H[j, i] = H[i, j]
    return 0.5 * (H + H.T)


def generator_apply(stein_field: SteinField, problem: Problem, x, eta: float, delta: float) -> float:
    """``L f(x)`` with ``Q^2 = eta Sigma(x) + delta I`` in the second-order term."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    hess = stein_field.hess_f(x) if stein_field.has_hessian else stein_hessian_fd(stein_field, x)
    a = problem.diffusion_matrix(x, eta, delta)
    return float(-(problem.grad_P(x) @ stein_field.grad_f(x)) + 0.5 * np.sum(a * hess))


@dataclass
class ResidualReport:
    max_residual: float
    residuals: np.ndarray
    points: np.ndarray
    tolerance: float
    backend: str
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_residual <= self.tolerance)


def stein_residual_check(stein_field: SteinField, problem: Problem, eta: float, delta: float, points) -> ResidualReport:
    """Largest ``|L f(x) - h(x) + pi(h)|`` over the given points."""
    if stein_field.h is None:
        raise ConfigurationError("field does not carry its test function")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[-1] != problem.dim:
        pts = pts.reshape(-1, problem.dim)
    res = np.array(
        [
            abs(generator_apply(stein_field, problem, p, eta, delta) - float(stein_field.h(p)) + stein_field.pi_h)
            for p in pts
        ]
    )
    return ResidualReport(float(res.max()), res, pts, stein_field.tolerance, stein_field.backend)


# ---------------------------------------------------------------------------
# Grid backend


class GridField(SteinField):
    """Piecewise-linear interpolant of ``f`` and ``grad f`` on a rectilinear grid.

    Queries outside the grid are clamped to its boundary; ``clamped`` counts
    the clamped query points.
    """

    def __init__(self, axes, f_values, grad_values, h=None, pi_h=0.0, tolerance=0.05, info=None):
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        if not self.axes or any(a.size < 2 for a in self.axes):
            raise ConfigurationError("grid needs at least two nodes per axis")
        if len(self.axes) > 2:
            raise ConfigurationError("grid fields support d <= 2")
        self.f_values = np.asarray(f_values, dtype=float)
        self.grad_values = np.asarray(grad_values, dtype=float)
        shape = tuple(a.size for a in self.axes)
        if self.f_values.shape != shape or self.grad_values.shape != (*shape, len(self.axes)):
            raise ConfigurationError("node values do not match the grid shape")
        self.clamped = 0
        super().__init__(self._interp_f, self._interp_grad, None, "grid", h, pi_h, tolerance, info)

    @property
    def dim(self) -> int:
        return len(self.axes)

    def _clamp(self, x):
        lo = np.array([a[0] for a in self.axes])
        hi = np.array([a[-1] for a in self.axes])
        out = ((x < lo) | (x > hi)).any(axis=-1)
        n_out = int(np.count_nonzero(out))
        if n_out:
            self.clamped += n_out
        return np.clip(x, lo, hi)

    def _interp(self, values, x):
        x = self._clamp(x)
        if self.dim == 1:
            return np.interp(x[..., 0], self.axes[0], values)
        from scipy.interpolate import RegularGridInterpolator

        rgi = RegularGridInterpolator(self.axes, values, method="linear")
        return rgi(x.reshape(-1, 2)).reshape(x.shape[:-1])

    def _interp_f(self, x):
        return self._interp(self.f_values, x)

    def _interp_grad(self, x):
        return np.stack([self._interp(self.grad_values[..., i], x) for i in range(self.dim)], axis=-1)


def _axes_from_spec(grid) -> list[np.ndarray]:
    if isinstance(grid, dict):
        grid = [grid]
    axes = []
    for ax in grid:
        if isinstance(ax, dict):
            axes.append(np.linspace(float(ax["lower"]), float(ax["upper"]), int(ax["n"])))
        else:
            axes.append(np.asarray(ax, dtype=float))
    if not axes or any(a.size == 0 for a in axes):
        raise ConfigurationError("empty grid")
    return axes


def grid_field(
    problem: Problem,
    h: TestFunction,
    grid,
    budget: int = 10_000,
    eta: float = 0.0,
    delta: float = 1.0,
    pi_h: float | None = None,
    seed: int = 0,
    source: SteinField | None = None,
    **mc_kwargs,
) -> GridField:
    """Tabulate a field on a grid and return its interpolant.

    ``grid`` is one axis spec ``{"lower", "upper", "n"}`` (or explicit node
    list) per dimension. Node values come from ``source`` when given,
    otherwise from a Monte Carlo field with ``budget`` paths per evaluation.
    """
    if problem.dim > 2:
        raise ConfigurationError("grid fields support d <= 2")
    axes = _axes_from_spec(grid)
    if len(axes) != problem.dim:
        raise ConfigurationError(f"grid has {len(axes)} axes for a {problem.dim}-d problem")
    if source is None:
        source = mc_stein_field(problem, h, eta, delta, pi_h, n_paths=budget, seed=seed, **mc_kwargs)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    f_vals = np.asarray(source.f(mesh), dtype=float)
    g_vals = np.asarray(source.grad_f(mesh), dtype=float)
    info = {"source_backend": source.backend, "budget": budget, "eta": eta, "delta": delta, "seed": seed}
    return GridField(axes, f_vals, g_vals, h, source.pi_h, source.tolerance, info)


def save_grid_field(fld: GridField, path) -> None:
    """Magic, little-endian u32 header length, JSON header, then f and grad blocks (<f8)."""
    header = {
        "version": GRID_FORMAT_VERSION,
        "axes": [a.tolist() for a in fld.axes],
        "shape": list(fld.f_values.shape),
        "dim": fld.dim,
        "dtype": "<f8",
        "blocks": ["f", "grad"],
        "pi_h": fld.pi_h,
        "tolerance": fld.tolerance,
        "h": fld.h.to_spec() if fld.h is not None else None,
        "info": fld.info,
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(fld.f_values.astype("<f8").tobytes())
        fh.write(fld.grad_values.astype("<f8").tobytes())


def load_grid_field(path) -> GridField:
    data = Path(path).read_bytes()
    if data[:8] != _GRID_MAGIC:
        raise ConfigurationError(f"{path}: not a grid-field file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + n])
    if header.get("version") != GRID_FORMAT_VERSION:
        raise ConfigurationError(f"{path}: unsupported grid-field version {header.get('version')}")
    shape = tuple(header["shape"])
    size = int(np.prod(shape))
    body = np.frombuffer(data[12 + n :], dtype="<f8")
    if body.size != size * (1 + header["dim"]):
        raise ConfigurationError(f"{path}: truncated node block")
    f_vals = body[:size].reshape(shape)
    g_vals = body[size:].reshape(*shape, header["dim"])
    h = None
    if header.get("h") is not None:
        h = TestFunction.from_spec(header["h"], header["dim"])
    return GridField(header["axes"], f_vals, g_vals, h, header["pi_h"], header["tolerance"], header["info"])
