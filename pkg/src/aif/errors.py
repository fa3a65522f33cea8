"""Exception hierarchy shared across the package.

Configuration problems (bad flags, malformed generator configs, missing
files) and numerical failures (singular systems, degenerate gradients)
are kept distinct so the CLI can map them to different exit codes.
"""


class AifError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AifError):
    """Invalid configuration: bad enum value, dimension mismatch, bad flag."""


class DataError(AifError):
    """Malformed input data: ragged CSV rows, bad IDX magic, non-finite cells."""


class NumericalError(AifError):
    """A numerical computation could not be completed reliably."""


class RankDeficiencyError(NumericalError):
    """A Gram or Hessian matrix is singular or too ill-conditioned to solve.

    Carries the condition estimate that triggered the failure.
    """

    def __init__(self, message: str, condition_estimate: float = float("inf")):
        super().__init__(message)
        self.condition_estimate = condition_estimate


class DegenerateGradientError(NumericalError):
    """The input gradient vanishes, so no steepest perturbation direction exists."""
