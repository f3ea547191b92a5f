"""Exception types shared across the package."""


class PrecondLabError(Exception):
    """Base class for all package-specific errors."""


class NonSquareError(PrecondLabError):
    """Matrix operation requires a square input."""


class NotSymmetricError(PrecondLabError):
    """Matrix operation requires a (similarity-)symmetric input."""


class NonFiniteError(PrecondLabError):
    """A NaN or Inf appeared where finite values are required."""


class ShapeMismatchError(PrecondLabError):
    """Operand shapes are inconsistent."""


class InvalidSpecError(PrecondLabError):
    """A task specification violates its invariants."""


class TooFewLayersError(PrecondLabError):
    """Trajectory is too short for the requested statistic."""


class DegenerateLabelsError(PrecondLabError):
    """Probe fitting needs at least two distinct labels."""


class AtOptimumError(PrecondLabError):
    """Contraction ratios are undefined when starting at the optimum."""


class DivergedError(PrecondLabError):
    """Training objective became non-finite or exceeded the guard bound."""

    def __init__(self, message, partial_report=None):
        super().__init__(message)
        self.partial_report = partial_report


class ConfigError(PrecondLabError):
    """Configuration file is missing, malformed, or invalid.

    ``path`` points at the offending field, e.g. ``train.lambda1``.
    """

    def __init__(self, message, path=""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
