"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class DiffsegError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffsegError):
    """Invalid configuration: bad key, bad value, incompatible settings."""


class DataError(DiffsegError):
    """Bad or missing input data, malformed files, shape mismatches."""


class NumericError(DiffsegError):
    """Non-finite values where finite ones are required (training aborts)."""
