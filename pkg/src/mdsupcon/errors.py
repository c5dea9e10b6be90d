"""Exception hierarchy shared across the package.

The CLI maps :class:`ValidationError` to exit code 1 and any other
:class:`MdsupconError` to exit code 2.
"""


class MdsupconError(Exception):
    pass


class ValidationError(MdsupconError, ValueError):
    """Bad input, config, or file contents."""


class ShapeError(ValidationError):
    pass


class DegenerateInputError(ValidationError):
    """Input that a numerically sensitive op cannot handle (e.g. a zero vector)."""


class NumericalError(MdsupconError, FloatingPointError):
    """A NaN or Inf appeared where finite values were required."""


class FormatError(ValidationError):
    """Binary file does not match the expected layout."""


class TruncatedFileError(FormatError):
    pass
