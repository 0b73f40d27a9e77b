"""Exception hierarchy shared across the package."""

from __future__ import annotations


class CmlivError(Exception):
    """Base class for all package errors."""


class InvalidConfigurationError(CmlivError, ValueError):
    """A configuration value is outside its valid range."""


class DatasetError(CmlivError, ValueError):
    """An input dataset violates the dataset invariants."""


class FitError(CmlivError, ValueError):
    """A regressor could not be fitted on the supplied data."""


class PredictionError(CmlivError, ValueError):
    """A fitted regressor was asked to predict on incompatible features."""


class CrossFitError(CmlivError, ValueError):
    """A cross-fitting plan cannot be carried out on the given sample."""


class UnsupportedInstrumentError(CmlivError, ValueError):
    """The requested estimator needs a binary instrument."""


class WeakIdentificationError(CmlivError, ArithmeticError):
    """The empirical moment denominator is numerically zero.

    Parameters
    ----------
    denominator : float
        Value of ``(1/n) sum w_i b_i kappa_i`` that triggered the error.
    tolerance : float
        Threshold the absolute denominator failed to exceed.
    """

    def __init__(self, denominator: float, tolerance: float, estimator: str = ""):
        self.denominator = float(denominator)
        self.tolerance = float(tolerance)
        self.estimator = estimator
        prefix = f"{estimator}: " if estimator else ""
        super().__init__(
            f"{prefix}weak identification, |denominator| = {abs(denominator):.3e} "
            f"<= tolerance {tolerance:.3e}"
        )


class ConfigParseError(CmlivError, ValueError):
    """A key=value configuration file could not be parsed."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
