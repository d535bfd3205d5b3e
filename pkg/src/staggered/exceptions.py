"""Exception hierarchy.

Two families matter to callers: problems with the input data or the requested
configuration (``ValidationError``) and numerical failures such as a singular
adjustment covariance (``NumericalError``). The CLI maps them to exit codes 2
and 3 respectively.
"""


class StaggeredError(Exception):
    """Base class for all package errors."""


class ValidationError(StaggeredError, ValueError):
    """Input panel, estimand or configuration is unusable."""


class UnidentifiedError(ValidationError):
    """An estimand requires (t, g) pairs whose effect is not identified."""

    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = list(pairs)


class NumericalError(StaggeredError, ArithmeticError):
    """A numerical step failed (singular matrix, negative variance...)."""


class SingularCovarianceError(NumericalError):
    """The estimated covariance of the adjustment vector is not positive definite."""
