from __future__ import annotations

import numpy as np
import pytest

from sgld_cmd.problems import TestFunction, make_gaussian_mean, make_perturbed_quadratic


@pytest.fixture
def gm():
    return make_gaussian_mean(1, 1.0)


@pytest.fixture
def pq():
    return make_perturbed_quadratic(1, 0.1, 1.0)


@pytest.fixture
def lin():
    return TestFunction.linear([1.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
