"""Exception types shared by every module.

The CLI maps :class:`InputError` to exit code 1 and :class:`NumericError`
to exit code 2.
"""


class DealError(Exception):
    """Base class for all errors raised by this package."""


class InputError(DealError, ValueError):
    """An argument, shape or file failed validation."""


class NumericError(DealError, ArithmeticError):
    """A computation produced or received non-finite values."""


class SingularSystemError(NumericError):
    """A linear system (TPS or affine fit) is singular or degenerate."""
