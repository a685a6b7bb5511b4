"""Exception types shared across the package.

The CLI maps these onto its exit codes: ``DataError`` -> 3, ``NumericError`` -> 4.
Both subclass ``ValueError`` so callers that only care about bad input can
catch that.
"""


class AvseError(Exception):
    """Base class for all package errors."""


class DataError(AvseError, ValueError):
    """Malformed, missing, or inconsistent input data."""


class ShapeError(DataError):
    """Array shapes or lengths that do not agree."""


class NumericError(AvseError, ArithmeticError):
    """A computation that is undefined for the given values."""


class GradError(AvseError, RuntimeError):
    """Misuse of the differentiation tape."""
