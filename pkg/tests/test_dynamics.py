from __future__ import annotations

import math

import numpy as np
import pytest

from sgld_cmd.dynamics import (
    CHUNK,
    ChainBatch,
    ChainConfig,
    derive_stream,
    em_step,
    load_trajectory,
    psd_sqrt,
    run_chain,
    save_trajectory,
    sde_path,
    sgld_step,
)
from sgld_cmd.errors import ChainDivergenceError, ConfigurationError, NumericError
from sgld_cmd.problems import AssumptionConstants, Problem, make_gaussian_mean


def _zero_problem(d=1):
    zero = lambda w, *a: np.zeros_like(np.asarray(w, dtype=float))  # noqa: E731
    return Problem(
        name="zero",
        dim=d,
        zeta_dim=d,
        sample_zeta=lambda g, size=None: np.zeros((*np.atleast_1d(size), d)),
        grad_psi=lambda w, z: np.zeros_like(np.asarray(w, dtype=float)),
        grad_P=zero,
        sigma=lambda w: np.zeros((*np.shape(w)[:-1], d, d)),
        constants=AssumptionConstants(1.0, 1.0, 0.0),
        sigma_constant=np.zeros((d, d)),
    )


def test_sgld_step_examples(gm):
    assert sgld_step(np.array([1.0]), np.array([0.5]), np.array([0.0]), 0.2, 1.0, gm)[0] == pytest.approx(0.9)
    assert sgld_step(np.array([0.0]), np.array([0.0]), np.array([1.0]), 0.04, 1.0, gm)[0] == pytest.approx(0.2)
    w = np.array([1.3])
    assert sgld_step(w, np.array([7.0]), np.array([0.0]), 0.0, 0.0, gm)[0] == 1.3


def test_sgld_step_nonfinite_gradient(gm):
    with pytest.raises(ChainDivergenceError) as err:
        sgld_step(np.array([np.inf]), np.array([0.0]), np.array([0.0]), 0.1, 1.0, gm, k=5)
    assert err.value.step == 5


def test_frozen_chain(gm):
    traj = run_chain(gm, ChainConfig(0.0, 0.0, 4, initial_state=3.0))
    assert np.array_equal(traj.states[:, 0], [3.0] * 4)


def test_noiseless_recursion_exact():
    p = make_gaussian_mean(1, 0.0)
    eta, w0 = 0.1, 2.0
    traj = run_chain(p, ChainConfig(eta, 0.0, 50, burn_in=0, initial_state=w0))
    expected = w0 * (1 - eta) ** np.arange(50)
    np.testing.assert_allclose(traj.states[:, 0], expected, rtol=1e-13)


def test_stationary_variance_ar1(gm):
    eta = 0.2
    traj = run_chain(gm, ChainConfig(eta, 1.0, 1_000_000, seed=4))
    x = traj.states[:, 0]
    v = (eta + 1.0) / (2 - eta)
    # AR(1) with rho = 1 - eta: batch means give an honest standard error
    sq = (x**2).reshape(100, -1).mean(axis=1)
    se = sq.std(ddof=1) / 10
    assert abs(np.mean(x**2) - v) <= 3 * se


def test_divergence_reported():
    p = make_gaussian_mean(1, 1.0)
    with pytest.raises(ChainDivergenceError):
        with pytest.warns(RuntimeWarning):
            run_chain(p, ChainConfig(3.5, 1.0, 200, burn_in=0))


def test_chain_config_validation():
    with pytest.raises(ConfigurationError):
        ChainConfig(0.1, 1.0, 0)
    assert ChainConfig(0.05, 1.0, 10).burn_in == 400


def test_batch_matches_single_chain(gm):
    streams = [derive_stream(9, i, "chain") for i in range(3)]
    batch = ChainBatch(gm, 0.1, 1.0, streams, np.zeros(1))
    final = batch.run(CHUNK + 17)
    for i in range(3):
        single = ChainBatch(gm, 0.1, 1.0, [derive_stream(9, i, "chain")], np.zeros(1))
        assert np.array_equal(single.run(CHUNK + 17)[0], final[i])


def test_replay_from_noise_log_is_bit_exact(gm, tmp_path):
    traj = run_chain(gm, ChainConfig(0.05, 1.0, 300, seed=2), keep_noise=True)
    w = traj.states[0].copy()
    for k in range(traj.m):
        assert np.array_equal(w, traj.states[k])
        w = sgld_step(w, traj.zeta[k], traj.xi[k], 0.05, 1.0, gm)
    assert np.array_equal(w, traj.final_state)
    save_trajectory(traj, tmp_path / "t.npy", audit=True)
    back = load_trajectory(tmp_path / "t.npy", 0.05, 1.0)
    assert np.array_equal(back.states, traj.states) and np.array_equal(back.xi, traj.xi)


def test_trajectory_csv_round_trip(gm, tmp_path):
    traj = run_chain(gm, ChainConfig(0.05, 1.0, 20, seed=2))
    save_trajectory(traj, tmp_path / "t.csv")
    back = load_trajectory(tmp_path / "t.csv", 0.05, 1.0)
    assert np.array_equal(back.path(), traj.path())
    with pytest.raises(ConfigurationError):
        save_trajectory(traj, tmp_path / "u.npy", audit=True)


def test_psd_sqrt_examples():
    np.testing.assert_array_equal(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))
    np.testing.assert_array_equal(psd_sqrt(np.eye(3)), np.eye(3))
    r = psd_sqrt(np.array([[2.0, 1.0], [1.0, 2.0]]))
    # eigenvalues 3 and 1 on (1,1)/sqrt2 and (1,-1)/sqrt2
    s3 = math.sqrt(3)
    expected = 0.5 * np.array([[s3 + 1, s3 - 1], [s3 - 1, s3 + 1]])
    np.testing.assert_allclose(r, expected, atol=1e-12)
    np.testing.assert_allclose(r, [[1.36603, 0.36603], [0.36603, 1.36603]], atol=1e-5)


def test_psd_sqrt_rejects_bad_input():
    with pytest.raises(NumericError):
        psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(NumericError):
        psd_sqrt(np.diag([1.0, -1.0]))


def test_em_step_examples(gm):
    z = _zero_problem()
    x = np.array([1.7])
    assert np.array_equal(em_step(x, 0.1, np.array([0.4]), 0.3, 0.0, z), x)
    assert em_step(np.array([1.0]), 0.1, np.array([0.0]), 0.0, 1.0, gm)[0] == pytest.approx(0.9)


def test_sde_path_examples(gm):
    p = sde_path(gm, [0.5], 0.01, 0.01, 0.0, 1.0, seed=3)
    assert p.states.shape == (2, 1)
    xi = derive_stream(3, 0, "sde").standard_normal((1, 1))[0]
    assert np.array_equal(p.states[1], em_step(np.array([0.5]), 0.01, xi, 0.0, 1.0, gm))
    flat = sde_path(_zero_problem(), [2.0], 1.0, 0.1, 0.0, 0.0)
    assert np.all(flat.states == 2.0) and len(flat.states) == 11


def test_sde_ou_mean():
    # drift -x, delta=1, Sigma=0: E X_T = exp(-T) x0; paths advanced together
    p = make_gaussian_mean(1, 0.0)
    T, dt, x0, n = 1.0, 0.01, 2.0, 10_000
    g = derive_stream(8, 0, "test")
    x = np.full((n, 1), x0)
    for _ in range(round(T / dt)):
        x = em_step(x, dt, g.standard_normal(x.shape), 0.0, 1.0, p)
    se = x.std(ddof=1) / math.sqrt(n)
    # allow for the O(dt) Euler bias of the discrete mean (1-dt)^n x0
    bias = x0 * abs((1 - dt) ** round(T / dt) - math.exp(-T))
    assert abs(x.mean() - x0 * math.exp(-T)) <= 4 * se + bias


def test_sde_ou_stationary_variance(gm):
    eta, sig = 0.1, 1.0
    x = np.zeros((20_000, 1))
    g = derive_stream(5, 0, "test")
    dt = 0.005
    for _ in range(int(10 / dt)):
        x = em_step(x, dt, g.standard_normal(x.shape), eta, 1.0, gm)
    v_exact = (eta * sig + 1.0) / 2
    # EM on OU has stationary variance a dt / (1 - (1-dt)^2) = a / (2 - dt)
    assert np.var(x) == pytest.approx(v_exact, rel=0.03)


def test_derive_stream():
    a = derive_stream(42, 0, "chain").standard_normal(100)
    b = derive_stream(42, 0, "chain").standard_normal(100)
    assert np.array_equal(a, b)
    assert a[0] != derive_stream(42, 1, "chain").standard_normal()
    assert a[0] != derive_stream(42, 0, "stein").standard_normal()
