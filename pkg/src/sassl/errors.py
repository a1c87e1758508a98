"""Exception hierarchy shared by all sassl modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class SasslError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SasslError):
    """Invalid or out-of-range configuration value."""


class DataError(SasslError):
    """Malformed or missing data artifact (patch files, index, checkpoint)."""


class NumericError(SasslError):
    """Numeric failure: non-finite values, degenerate inputs, NaN gradients."""


class ShapeError(SasslError):
    """Tensor shape or dimension mismatch."""
