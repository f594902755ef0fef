"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``FormatError`` -> 2, ``NumericError`` -> 3.
"""


class OSLRError(Exception):
    """Base class for all package errors."""


class ShapeError(OSLRError, ValueError):
    """Tensor shapes or channel counts do not fit an operation."""


class NumericError(OSLRError, ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class FormatError(OSLRError):
    """A dataset, checkpoint, image or config file is malformed."""


class TapeError(OSLRError, RuntimeError):
    """Misuse of the gradient tape (frozen tape, foreign tensor, ...)."""
