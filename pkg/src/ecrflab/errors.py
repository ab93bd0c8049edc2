"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ParameterError -> 2,
DataFormatError -> 3, NumericError -> 4.
"""


class EcrfError(Exception):
    """Base class for all package-specific errors."""


class ParameterError(EcrfError):
    """Invalid argument or configuration value."""


class DataFormatError(EcrfError):
    """Malformed file, checkpoint, or incompatible array shape."""


class ShapeError(DataFormatError):
    """Array dimensions do not satisfy an operation's contract."""


class NumericError(EcrfError):
    """Non-finite value encountered where finiteness is required."""


class StateError(EcrfError):
    """Operation called in the wrong order (e.g. backward before forward)."""
