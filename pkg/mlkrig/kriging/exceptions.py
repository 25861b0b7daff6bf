"""
Numerical and configuration failures.

Data and parameter-domain problems are reported with Django's
ValidationError (with a ``code``); the classes here cover failures of the
numerics themselves and of run configuration.
"""


class NumericalError(Exception):
    """Base class for failures of the linear algebra or the optimizer."""


class NotPositiveDefinite(NumericalError):
    """A covariance (or transformed covariance) failed to factor as SPD."""


class NumericalBreakdown(NumericalError):
    """A quantity that must be positive came out negative beyond roundoff."""


class NonConvergence(NumericalError):
    """An iterative solve hit its iteration limit."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class EstimationFailed(NumericalError):
    """Every likelihood evaluation was infeasible."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []


class ConfigError(Exception):
    """Invalid run configuration (config file, flags or settings)."""
