"""SGLD chains, the Euler-Maruyama scheme for the approximating SDE, and RNG streams.

Every chain owns one :func:`derive_stream` generator. Noise is drawn from it
in fixed-size chunks (``CHUNK`` steps, ``zeta`` block first, then ``xi``),
so a chain's path depends only on its seed and never on how chains are
batched together or distributed over workers.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ChainDivergenceError, ConfigurationError, NumericError
from .problems import Problem

__all__ = [
    "BURN_IN_C",
    "CHUNK",
    "ChainBatch",
    "ChainConfig",
    "DIVERGENCE_BOUND",
    "SdePath",
    "Trajectory",
    "derive_stream",
    "em_step",
    "load_trajectory",
    "psd_sqrt",
    "run_chain",
    "save_trajectory",
    "sde_path",
    "sgld_step",
]

CHUNK = 1024
DIVERGENCE_BOUND = 1e12
BURN_IN_C = 20.0


def _tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:8], "little")


def derive_stream(master_seed: int, replication_index: int, purpose_tag: str) -> np.random.Generator:
    """Independent, reproducible Philox stream keyed by (seed, index, tag)."""
    ss = np.random.SeedSequence(
        entropy=int(master_seed) & (2**64 - 1),
        spawn_key=(int(replication_index), _tag_key(purpose_tag)),
    )
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Linear algebra


def psd_sqrt(a, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition; accepts stacked matrices.

    Eigenvalues down to ``-tol * ||A||`` are clipped to zero; anything more
    negative, or asymmetry beyond ``tol * max(1, ||A||)``, raises
    :class:`NumericError`.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise NumericError(f"expected square matrices, got shape {a.shape}")
    scale = np.linalg.norm(a, axis=(-2, -1))
    asym = np.abs(a - np.swapaxes(a, -1, -2)).max(axis=(-2, -1))
    if np.any(asym > tol * np.maximum(1.0, scale)):
        raise NumericError(f"matrix is not symmetric (max asymmetry {float(np.max(asym)):.3g})")
    a = 0.5 * (a + np.swapaxes(a, -1, -2))
    off = a - np.eye(a.shape[-1]) * np.diagonal(a, axis1=-2, axis2=-1)[..., None, :]
    if not off.any():
        diag = np.diagonal(a, axis1=-2, axis2=-1)
        if np.any(diag < -tol * scale[..., None]):
            raise NumericError("matrix has a negative eigenvalue")
        return np.eye(a.shape[-1]) * np.sqrt(np.clip(diag, 0.0, None))[..., None, :]
    lam, vec = np.linalg.eigh(a)
    if np.any(lam < -tol * scale[..., None]):
        raise NumericError(f"matrix has a negative eigenvalue ({float(lam.min()):.3g})")
    root = np.sqrt(np.clip(lam, 0.0, None))
    s = (vec * root[..., None, :]) @ np.swapaxes(vec, -1, -2)
    return 0.5 * (s + np.swapaxes(s, -1, -2))


# ---------------------------------------------------------------------------
# SGLD


@dataclass
class ChainConfig:
    """Parameters of one SGLD run.

    ``burn_in=None`` means ``ceil(BURN_IN_C / eta)`` steps, enough for the
    geometric mixing of the chain to reach ``exp(-BURN_IN_C)``.
    """

    eta: float
    delta: float
    m: int
    burn_in: int | None = None
    seed: int = 0
    initial_state: Sequence[float] | float = 0.0

    def __post_init__(self):
        if self.eta < 0 or self.delta < 0:
            raise ConfigurationError("eta and delta must be nonnegative")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"m must be a positive integer, got {self.m!r}")
        self.m = int(self.m)
        if self.burn_in is None:
            self.burn_in = math.ceil(BURN_IN_C / self.eta) if self.eta > 0 else 0
        if self.burn_in < 0:
            raise ConfigurationError("burn_in must be nonnegative")

    @property
    def m_eta(self) -> float:
        return self.m * self.eta

    def initial(self, dim: int) -> np.ndarray:
        x0 = np.atleast_1d(np.asarray(self.initial_state, dtype=float))
        if x0.size == 1:
            x0 = np.full(dim, float(x0[0]))
        if x0.shape != (dim,):
            raise ConfigurationError(f"initial state has shape {x0.shape}, expected ({dim},)")
        return x0


@dataclass
class Trajectory:
    """Recorded states ``w_0 .. w_{m-1}`` plus the endpoint ``w_m``.

    ``zeta[k]`` and ``xi[k]`` are the draws that moved ``w_k`` to ``w_{k+1}``;
    they are kept only when the run was asked to log noise.
    """

    states: np.ndarray
    final_state: np.ndarray
    eta: float
    delta: float
    zeta: np.ndarray | None = None
    xi: np.ndarray | None = None

    @property
    def m(self) -> int:
        return len(self.states)

    @property
    def has_noise_log(self) -> bool:
        return self.zeta is not None and self.xi is not None

    def path(self) -> np.ndarray:
        """States ``w_0 .. w_m`` including the endpoint."""
        return np.vstack([self.states, self.final_state[None, :]])


def _step(w, zeta, xi, eta, noise_scale, grad_psi):
    return w - eta * grad_psi(w, zeta) + noise_scale * xi


def sgld_step(w, zeta, xi, eta: float, delta: float, problem: Problem, k: int = 0) -> np.ndarray:
    """One SGLD update ``w - eta * grad_psi(w, zeta) + sqrt(eta * delta) * xi``."""
    if eta < 0 or delta < 0:
        raise ConfigurationError("eta and delta must be nonnegative")
    w = np.asarray(w, dtype=float)
    g = problem.grad_psi(w, zeta)
    if not np.all(np.isfinite(g)):
        raise ChainDivergenceError(k, w, "produced a non-finite gradient")
    return w - eta * g + math.sqrt(eta * delta) * np.asarray(xi, dtype=float)


class ChainBatch:
    """A block of independent SGLD chains advanced together.

    Args:
        problem: loss model.
        eta, delta: step size and inverse temperature.
        streams: generators; each drives ``width`` chains.
        x0: initial states, shape ``(n_chains, d)`` or ``(d,)``.
        width: chains per stream. Noise is drawn in chunks of
            ``max(1, CHUNK // width)`` steps.
    """

    def __init__(self, problem: Problem, eta: float, delta: float, streams, x0, width: int = 1):
        self.problem = problem
        self.eta = float(eta)
        self.delta = float(delta)
        self.noise_scale = math.sqrt(self.eta * self.delta)
        self.streams = list(streams)
        self.width = int(width)
        self.chunk = max(1, CHUNK // self.width)
        n = len(self.streams) * self.width
        x0 = np.asarray(x0, dtype=float)
        self.state = np.array(np.broadcast_to(x0, (n, problem.dim)), dtype=float)
        self.steps_done = 0
        self.diverged_at = np.full(n, -1, dtype=np.int64)

    @property
    def diverged(self) -> np.ndarray:
        return self.diverged_at >= 0

    def _draw(self, c: int):
        p = self.problem
        n, w = len(self.streams), self.width
        zeta = np.empty((c, n, w, p.zeta_dim))
        xi = np.empty((c, n, w, p.dim))
        for i, g in enumerate(self.streams):
            zeta[:, i] = np.asarray(p.sample_zeta(g, (c, w))).reshape(c, w, p.zeta_dim)
            xi[:, i] = g.standard_normal((c, w, p.dim))
        return zeta.reshape(c, n * w, p.zeta_dim), xi.reshape(c, n * w, p.dim)

    def _flag(self, states: np.ndarray, start: int):
        bad = ~np.isfinite(states) | (np.abs(states) > DIVERGENCE_BOUND)
        bad = bad.any(axis=-1)
        hit = bad.any(axis=0) & (self.diverged_at < 0)
        if hit.any():
            first = np.argmax(bad, axis=0)
            self.diverged_at[hit] = start + first[hit]

    def run(self, n_steps: int, observer: Callable | None = None) -> np.ndarray:
        """Advance ``n_steps`` steps.

        ``observer(k0, states, zeta, xi)`` is called once per chunk with the
        pre-step states ``w_{k0} .. w_{k0+C-1}`` of shape ``(C, n_chains, d)``
        and the noise that moved them. Without an observer only chunk
        endpoints are checked for divergence. Returns the final states.
        """
        grad_psi = self.problem.grad_psi
        w = self.state
        done = 0
        with np.errstate(over="ignore", invalid="ignore"):
            while done < n_steps:
                c = min(self.chunk, n_steps - done)
                zeta, xi = self._draw(c)
                if observer is None:
                    for j in range(c):
                        w = _step(w, zeta[j], xi[j], self.eta, self.noise_scale, grad_psi)
                    self._flag(w[None], self.steps_done + c)
                else:
                    states = np.empty((c, *w.shape))
                    for j in range(c):
                        states[j] = w
                        w = _step(w, zeta[j], xi[j], self.eta, self.noise_scale, grad_psi)
                    self._flag(np.concatenate([states, w[None]]), self.steps_done)
                    observer(self.steps_done, states, zeta, xi)
                done += c
                self.steps_done += c
        self.state = w
        return w


def run_chain(problem: Problem, config: ChainConfig, keep_noise: bool = False, stream=None) -> Trajectory:
    """Burn in, then record ``m`` states of one chain.

    The default stream is ``derive_stream(config.seed, 0, "chain")``.
    Raises :class:`ChainDivergenceError` with the (post burn-in relative,
    negative during burn-in) step index once ``|w| > 1e12``.
    """
    L = problem.constants.L
    if config.eta * L >= 1.0:
        warnings.warn(f"eta * L = {config.eta * L:.3g} >= 1; the chain may be unstable", RuntimeWarning)
    if stream is None:
        stream = derive_stream(config.seed, 0, "chain")
    batch = ChainBatch(problem, config.eta, config.delta, [stream], config.initial(problem.dim))
    batch.run(config.burn_in)
    if batch.diverged[0]:
        k = int(batch.diverged_at[0]) - config.burn_in
        raise ChainDivergenceError(k, batch.state[0])
    d, r, m = problem.dim, problem.zeta_dim, config.m
    states = np.empty((m, d))
    zeta = np.empty((m, r)) if keep_noise else None
    xi = np.empty((m, d)) if keep_noise else None
    offset = config.burn_in

    def record(k0, st, z, x):
        k = k0 - offset
        c = len(st)
        states[k : k + c] = st[:, 0]
        if keep_noise:
            zeta[k : k + c] = z[:, 0]
            xi[k : k + c] = x[:, 0]

    final = batch.run(m, record)
    if batch.diverged[0]:
        k = int(batch.diverged_at[0]) - offset
        bad = states[k] if k < m else final[0]
        raise ChainDivergenceError(k, bad)
    return Trajectory(states, final[0].copy(), config.eta, config.delta, zeta, xi)


def save_trajectory(traj: Trajectory, path, audit: bool = False) -> None:
    """Write ``.csv`` (columns ``k, w0..``) or ``.npy`` (flat binary of ``w_0..w_m``).

    With ``audit=True`` the noise log goes to ``<stem>.noise.npz`` alongside.
    """
    from pathlib import Path

    path = Path(path)
    full = traj.path()
    if path.suffix == ".csv":
        header = "k," + ",".join(f"w{i}" for i in range(full.shape[1]))
        rows = np.column_stack([np.arange(len(full)), full])
        np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=["%d"] + ["%.17g"] * full.shape[1])
    else:
        np.save(path, full)
    if audit:
        if not traj.has_noise_log:
            raise ConfigurationError("audit output requested but the trajectory has no noise log")
        np.savez(path.with_suffix(".noise.npz"), zeta=traj.zeta, xi=traj.xi)


def load_trajectory(path, eta: float, delta: float) -> Trajectory:
    from pathlib import Path

    path = Path(path)
    if path.suffix == ".csv":
        full = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))[:, 1:]
    else:
        full = np.load(path)
    noise = path.with_suffix(".noise.npz")
    zeta = xi = None
    if noise.exists():
        with np.load(noise) as z:
            zeta, xi = z["zeta"], z["xi"]
    return Trajectory(full[:-1], full[-1], eta, delta, zeta, xi)


# ---------------------------------------------------------------------------
# Euler-Maruyama


@dataclass
class SdePath:
    times: np.ndarray
    states: np.ndarray
    dt: float
    horizon: float


def n_grid_steps(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise ConfigurationError("need T > 0 and dt > 0")
    if dt > T:
        raise ConfigurationError("dt must not exceed the horizon")
    return max(1, math.ceil(T / dt - 1e-9))


def diffusion_root(problem: Problem, x, eta: float, delta: float) -> np.ndarray:
    """``(eta * Sigma(x) + delta * I)^{1/2}``, shape ``(..., d, d)``."""
    if problem.sigma_constant is not None:
        return psd_sqrt(eta * problem.sigma_constant + delta * np.eye(problem.dim))
    return psd_sqrt(problem.diffusion_matrix(x, eta, delta))


def em_step(x, dt: float, xi, eta: float, delta: float, problem: Problem, q=None) -> np.ndarray:
    """``x - grad_P(x) dt + Q(x) sqrt(dt) xi`` with ``Q = psd_sqrt(eta Sigma + delta I)``.

    ``q`` may carry a precomputed diffusion root for state-independent
    ``Sigma``.
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    x = np.asarray(x, dtype=float)
    drift = problem.grad_P(x)
    if not np.all(np.isfinite(drift)):
        raise ChainDivergenceError(0, x, "produced a non-finite drift")
    if q is None:
        q = diffusion_root(problem, x, eta, delta)
    noise = np.einsum("...ij,...j->...i", q, np.asarray(xi, dtype=float))
    return x - drift * dt + math.sqrt(dt) * noise


def sde_path(problem: Problem, x0, T: float, dt: float, eta: float, delta: float, seed=0) -> SdePath:
    """Single Euler-Maruyama path on the uniform grid ``0, dt, .., n dt`` (``n = ceil(T/dt)``)."""
    n = n_grid_steps(T, dt)
    g = seed if isinstance(seed, np.random.Generator) else derive_stream(seed, 0, "sde")
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    q = diffusion_root(problem, x, eta, delta) if problem.sigma_constant is not None else None
    xi = g.standard_normal((n, problem.dim))
    states = np.empty((n + 1, problem.dim))
    states[0] = x
    for j in range(n):
        x = em_step(x, dt, xi[j], eta, delta, problem, q)
        if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_BOUND:
            raise ChainDivergenceError(j + 1, x)
        states[j + 1] = x
    return SdePath(np.arange(n + 1) * dt, states, dt, T)
