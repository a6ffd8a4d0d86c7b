"""Exception types shared across the package."""


class EvofamError(Exception):
    """Base class for all package errors."""


class InvalidArgument(EvofamError, ValueError):
    """An argument is malformed or outside the documented domain."""


class PreconditionViolated(InvalidArgument):
    """Input is well-formed but violates a documented precondition."""


class InvalidWeight(InvalidArgument):
    """A weight sample is nonpositive or not finite."""


class NumericFailure(EvofamError, ArithmeticError):
    """A numerical kernel failed; ``context`` says where."""

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class DivergenceError(NumericFailure):
    """A fixed-point iteration stopped contracting."""
