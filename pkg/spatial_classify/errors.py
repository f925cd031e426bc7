"""
Exception types raised across spatial_classify.

The command line maps ValidationError (and its subclasses) to exit code 2 and
every other SpatialClassifyError to exit code 1.
"""
from typing import Iterable


class SpatialClassifyError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SpatialClassifyError):
    """Bad input data, configuration or argument values."""


class InvalidBoundError(ValidationError):
    """Truncation or prior bounds with lower >= upper."""


class DegenerateResponseError(ValidationError):
    """Training responses contain a single class."""


class DataFormatError(ValidationError):
    """Malformed CSV or JSON input."""

    def __init__(self, message: str, columns: Iterable[str] = ()):
        self.columns = list(columns)
        if self.columns:
            message = f"{message}: {', '.join(self.columns)}"
        super().__init__(message)


class SingularMatrixError(SpatialClassifyError):
    """A factorization failed or a matrix is not positive definite."""


class SeparationError(SpatialClassifyError):
    """The maximum likelihood estimate does not exist (separated classes)."""


class ConvergenceError(SpatialClassifyError):
    """An iterative solver hit its iteration cap."""


class DegenerateChainError(SpatialClassifyError):
    """A chain segment has zero variance."""


class DegenerateVariogramError(SpatialClassifyError):
    """The covariate is constant so no variogram can be fitted."""


class EmptyChainError(SpatialClassifyError):
    """No posterior draws were supplied."""
