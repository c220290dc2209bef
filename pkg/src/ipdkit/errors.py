"""Exception hierarchy shared by all ipdkit modules."""

from __future__ import annotations

import numpy as np


class IpdError(Exception):
    """Base class for all ipdkit errors."""


class SchemaError(IpdError):
    """A required column or config key is missing or malformed."""


class ParseError(IpdError):
    """A cell could not be parsed; carries the offending row index."""

    def __init__(self, message: str, row_index: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row_index = row_index
        self.column = column


class ValidationError(IpdError):
    """Input data violates a documented invariant."""


class DimensionError(IpdError):
    """Vector/matrix dimensions are inconsistent with the target."""


class InsufficientDataError(IpdError):
    """Too few rows for the requested fit."""


class RankError(IpdError):
    """A matrix that must be inverted is (numerically) singular."""


class NonConvergenceError(IpdError):
    """Solver failed to converge; carries the last iterate."""

    def __init__(self, message: str, last_iterate: np.ndarray | None = None, iterations: int = 0):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class DegenerateError(IpdError):
    """A quantity needed by the computation has no variation."""


class UnavailableError(IpdError):
    """A required oracle or input is not available in this context."""


class HarnessError(IpdError):
    """Monte Carlo harness failure (e.g. too many estimator failures)."""


class DegenerateVarianceWarning(UserWarning):
    """Tuning denominator is zero; weight falls back to zero."""
