"""Exception hierarchy.

The CLI maps each family to an exit code, so every error raised by the
library belongs to exactly one of these classes (or is a plain ValueError
for argument problems).
"""


class AssocError(Exception):
    """Base class for errors raised by assocmodel."""


class DimensionError(AssocError, ValueError):
    """Vector or matrix dimensions do not match the model."""


class DataFormatError(AssocError, ValueError):
    """Input data file is malformed."""


class ConfigError(AssocError, ValueError):
    """Run configuration is malformed or inconsistent."""


class EvaluationError(AssocError, ArithmeticError):
    """A log odds-ratio evaluation produced a non-finite value."""

    def __init__(self, message, stratum=None):
        super().__init__(message)
        self.stratum = stratum


class ConvergenceError(AssocError, RuntimeError):
    """An iterative procedure did not reach its tolerance."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class DivergenceError(ConvergenceError):
    """The likelihood increases without bound (no maximizer exists)."""


class IdentifiabilityError(AssocError, RuntimeError):
    """The information matrix is singular or the design is rank deficient."""


class ConsistencyError(AssocError, ValueError):
    """A parameter vector does not reproduce the supplied distribution."""
