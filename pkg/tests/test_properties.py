from __future__ import annotations

import warnings

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgld_cmd.dynamics import psd_sqrt
from sgld_cmd.problems import TestFunction
from sgld_cmd.stats import ks_distance, tail_ratio_table, w1_sorted
from sgld_cmd.stein import analytic_stein_ou

finite = st.floats(-1e3, 1e3, allow_nan=False)
samples = arrays(np.float64, st.integers(1, 60), elements=finite)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 3), elements=st.floats(-5, 5)))
def test_psd_sqrt_squares_back(b):
    a = b @ b.T
    r = psd_sqrt(a)
    assert np.allclose(r, r.T)
    assert np.all(np.linalg.eigvalsh(r) >= -1e-8)
    assert np.allclose(r @ r, a, atol=1e-7 * max(1.0, np.abs(a).max()))


@settings(max_examples=100, deadline=None)
@given(samples, samples)
def test_w1_metric_properties(a, b):
    assert w1_sorted(a, a) == 0.0
    assert w1_sorted(a, b) >= 0.0
    assert np.isclose(w1_sorted(a, b), w1_sorted(b, a), rtol=1e-12, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(samples, st.floats(-100, 100))
def test_w1_shift(a, c):
    assert np.isclose(w1_sorted(a, a + c), abs(c), rtol=1e-9, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(samples, samples, samples)
def test_w1_triangle(a, b, c):
    n = min(len(a), len(b), len(c))
    a, b, c = a[:n], b[:n], c[:n]
    assert w1_sorted(a, c) <= w1_sorted(a, b) + w1_sorted(b, c) + 1e-9


@settings(max_examples=100, deadline=None)
@given(samples)
def test_ks_bounds_and_permutation(x):
    d = ks_distance(x)
    assert 0.0 <= d <= 1.0
    assert ks_distance(x[::-1]) == d


@settings(max_examples=100, deadline=None)
@given(samples, st.lists(st.floats(0, 3), min_size=1, max_size=5))
def test_tail_table_consistent_with_counts(x, grid):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = tail_ratio_table(x, grid)
    for xi, p in zip(grid, t.p_hat):
        assert p == np.mean(x > xi)
    for xi, p in zip(grid, t.mirrored.p_hat):
        assert p == np.mean(-x > xi)


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.floats(-3, 3), st.floats(0.1, 4))
def test_stein_solution_linear_in_h(c, x, a):
    h = TestFunction.quadratic(1, center=[0.3])
    base = analytic_stein_ou(h, a)
    scaled = analytic_stein_ou(h.scaled(c), a)
    pt = np.array([x])
    assert np.isclose(scaled.f(pt), c * base.f(pt), rtol=1e-12, atol=1e-12)
    assert np.allclose(scaled.grad_f(pt), c * base.grad_f(pt), rtol=1e-12, atol=1e-12)
