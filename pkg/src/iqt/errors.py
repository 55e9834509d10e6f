"""Exception and warning types shared across the toolkit."""

from __future__ import annotations


class IqtError(Exception):
    """Base class for all toolkit errors."""


class FormatError(IqtError):
    """A file does not start with the expected magic/header layout."""


class CorruptionError(IqtError):
    """A file header is valid but the payload is inconsistent with it."""


class GeometryError(IqtError):
    """Dims, origins, or shapes are mutually inconsistent."""


class ParameterError(IqtError):
    """A value violates an operation precondition."""


class DataError(IqtError):
    """Required input data is missing or unusable."""


class SamplingError(IqtError):
    """Rejection sampling failed to produce an admissible sample."""


class ConfigError(IqtError):
    """A run configuration could not be parsed or validated."""


class ConvergenceWarning(UserWarning):
    """An iterative solver stopped at its sweep limit.

    Carries the final KKT residual so callers can aggregate diagnostics.
    """

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = float(residual)
