"""Exception types shared across the package.

Each maps to one CLI exit code (see :mod:`trajvfi.cli`).
"""


class InvalidArgument(ValueError):
    """Caller passed a value that violates an operation's precondition."""


class NotFound(FileNotFoundError):
    """A required file (frame, sidecar flow, checkpoint) is missing."""


class InvalidData(ValueError):
    """On-disk data is malformed or inconsistent."""


class PreconditionFailed(RuntimeError):
    """A pipeline step was invoked before its prerequisites exist."""


class NumericFailure(ArithmeticError):
    """A loss or output became non-finite."""
