"""Exception hierarchy shared by every module."""

from __future__ import annotations

import numpy as np


class SgldError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SgldError, ValueError):
    """Invalid parameters, dimensions or experiment configuration."""


class NumericError(SgldError, ArithmeticError):
    """Input violates a numerical precondition (asymmetry, negative spectrum, ...)."""


class DiagnosticError(SgldError):
    """A diagnostic could not be computed from the supplied samples."""


class DegenerateStatisticError(SgldError, ZeroDivisionError):
    """A self-normalized statistic has a zero normalizer."""


class ChainDivergenceError(SgldError):
    """The chain left the finite region; carries the step index and state."""

    def __init__(self, step: int, state, reason: str = "diverged"):
        self.step = int(step)
        self.state = np.array(state, dtype=float, copy=True)
        super().__init__(f"chain {reason} at step {self.step}: state={self.state.tolist()}")
