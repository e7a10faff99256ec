from __future__ import annotations

import numpy as np
import pytest

from sgld_cmd.errors import ConfigurationError
from sgld_cmd.problems import TestFunction, make_gaussian_mean, make_perturbed_quadratic
from sgld_cmd.stein import (
    GridField,
    analytic_stein_ou,
    estimate_pi_h,
    generator_apply,
    grid_field,
    load_grid_field,
    mc_stein_field,
    save_grid_field,
    stein_f_mc,
    stein_grad_mc,
    stein_hessian_fd,
    stein_residual_check,
)

# a = eta * sigma2 + delta = 1 for these arguments
ETA0, DELTA1 = 0.0, 1.0


def test_analytic_linear(gm, lin):
    fld = analytic_stein_ou(lin, 1.0)
    x = np.array([2.0])
    assert fld.f(x) == -2.0 and fld.grad_f(x)[0] == -1.0
    # L f = <-x, -1> = x = h - pi(h)
    assert generator_apply(fld, gm, x, ETA0, DELTA1) == pytest.approx(2.0)


def test_analytic_constant(gm):
    fld = analytic_stein_ou(TestFunction.constant(3.0), 1.0)
    assert fld.f(np.array([1.5])) == 0.0 and fld.pi_h == 3.0


def test_analytic_quadratic(gm):
    h = TestFunction.quadratic(1)
    fld = analytic_stein_ou(h, 1.0)
    assert fld.f(np.array([0.0])) == pytest.approx(0.25)
    assert generator_apply(fld, gm, np.array([0.0]), ETA0, DELTA1) == pytest.approx(-0.5)
    assert fld.pi_h == pytest.approx(0.5)


def test_analytic_quadratic_second_moment_oracle():
    # E_x X_t^2 = exp(-2t) x^2 + (a/2)(1 - exp(-2t)), so f(x) = -int_0^inf exp(-2t)(x^2 - a/2) dt
    a = 1.7
    t = np.linspace(0.0, 40.0, 400_001)
    fld = analytic_stein_ou(TestFunction.quadratic(1), a)
    for x in (-1.2, 0.0, 0.4, 2.5):
        y = np.exp(-2 * t) * (x * x - a / 2)
        f_num = -np.sum((y[1:] + y[:-1]) * np.diff(t)) / 2
        assert fld.f(np.array([x])) == pytest.approx(f_num, abs=1e-6)


def test_analytic_rejects_custom():
    h = TestFunction.custom(np.sin, 1.0)
    with pytest.raises(ConfigurationError):
        analytic_stein_ou(h, 1.0)


def test_mc_matches_analytic_at_two(gm, lin):
    est, se = stein_f_mc(gm, lin, [2.0], T=15, dt=0.01, n_paths=100_000, pi_h=0.0, stream=1)
    assert est == pytest.approx(-2.0, abs=0.02)


def test_mc_constant_exactly_zero(gm):
    h = TestFunction.constant(1.25)
    est, se = stein_f_mc(gm, h, [0.7], T=2, dt=0.01, n_paths=100, pi_h=1.25, stream=0)
    assert est == 0.0


def test_mc_symmetric_point(gm, lin):
    est, se = stein_f_mc(gm, lin, [0.0], T=10, dt=0.01, n_paths=2000, pi_h=0.0, stream=2, antithetic=False)
    assert abs(est) <= 3 * se


def test_mc_rejects_tiny_budget(gm, lin):
    with pytest.raises(ConfigurationError):
        stein_f_mc(gm, lin, [0.0], T=1, n_paths=1, pi_h=0.0)


def test_mc_gradient(gm, lin):
    g = stein_grad_mc(gm, lin, [0.3], T=15, n_paths=2000, pi_h=0.0, stream=0)
    assert g[0] == pytest.approx(-1.0, abs=0.01)
    assert stein_grad_mc(gm, TestFunction.constant(0.0), [0.3], T=2, n_paths=100, pi_h=0.0)[0] == 0.0
    q = TestFunction.quadratic(1)
    gq = stein_grad_mc(gm, q, [1.0], T=15, n_paths=20_000, pi_h=0.5, stream=0)
    assert gq[0] == pytest.approx(-1.0, abs=0.02)
    with pytest.raises(ConfigurationError):
        stein_grad_mc(gm, lin, [0.0], eps=0.0)


def test_hessian_fd():
    lin_f = analytic_stein_ou(TestFunction.linear([1.0, 2.0]), 1.0, 2)
    assert np.array_equal(stein_hessian_fd(lin_f, [0.3, -0.1]), np.zeros((2, 2)))
    q = analytic_stein_ou(TestFunction.quadratic(1), 1.0)
    assert stein_hessian_fd(q, [0.4])[0, 0] == pytest.approx(-1.0, abs=1e-6)
    H = stein_hessian_fd(analytic_stein_ou(TestFunction.quadratic(3), 1.0), [0.1, 0.2, 0.3])
    assert np.array_equal(H, H.T)


def test_residual_linear_and_quadratic(gm, pq):
    pts = np.random.default_rng(0).uniform(-5, 5, (20, 1))
    for h in (TestFunction.linear([1.0]), TestFunction.quadratic(1, center=[0.3], offset=1.0)):
        fld = gm.analytic.stein(h, 0.01, 1.0)
        assert stein_residual_check(fld, gm, 0.01, 1.0, pts).max_residual <= 1e-12


def test_residual_mc_field(gm, lin):
    fld = mc_stein_field(gm, lin, 0.0, 1.0, pi_h=0.0, T=15, n_paths=100_000, seed=0)
    rep = stein_residual_check(fld, gm, 0.0, 1.0, [[-2.0], [0.0], [2.0]])
    assert rep.max_residual <= 0.05


def test_estimate_pi_h(pq):
    # perturbed drift is odd, so pi(x) = 0 by symmetry
    m, se = estimate_pi_h(pq, TestFunction.linear([1.0]), 0.0, 1.0, length=400, stream=0)
    assert abs(m) <= 4 * se


def test_grid_field(gm, lin, tmp_path):
    exact = analytic_stein_ou(lin, 1.0)
    grid = {"lower": -3.0, "upper": 3.0, "n": 13}
    g = grid_field(gm, lin, grid, source=exact)
    node = np.array([[1.5]])
    assert g.f(node)[0] == exact.f(node)[0]
    assert g.clamped == 0
    g.f(np.array([[10.0]]))
    assert g.clamped == 1
    save_grid_field(g, tmp_path / "g.bin")
    back = load_grid_field(tmp_path / "g.bin")
    assert np.array_equal(back.f_values, g.f_values)
    with pytest.raises(ConfigurationError):
        grid_field(gm, lin, [], source=exact)


def test_grid_field_mc_gradient(gm, lin):
    g = grid_field(gm, lin, {"lower": -2.0, "upper": 2.0, "n": 5}, budget=2000, eta=0.0, delta=1.0, pi_h=0.0, T=15)
    x = np.linspace(-2, 2, 17)[:, None]
    assert np.max(np.abs(g.grad_f(x)[:, 0] + 1.0)) <= 0.02


def test_grid_field_2d():
    p = make_gaussian_mean(2, 1.0)
    h = TestFunction.linear([1.0, 1.0])
    exact = analytic_stein_ou(h, 1.0, 2)
    g = grid_field(p, h, [{"lower": -1, "upper": 1, "n": 3}] * 2, source=exact)
    x = np.array([[0.25, -0.5]])
    assert g.f(x)[0] == pytest.approx(exact.f(x)[0])
    assert isinstance(g, GridField)


def test_grid_rejects_high_dim():
    p = make_perturbed_quadratic(3, 0.1)
    with pytest.raises(ConfigurationError):
        grid_field(p, TestFunction.linear([1, 0, 0]), [{"lower": -1, "upper": 1, "n": 3}] * 3)
