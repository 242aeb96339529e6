"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class FaceRestoreError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(FaceRestoreError):
    """Invalid, inconsistent, or unknown configuration."""


class DataError(FaceRestoreError):
    """Missing, unreadable, or malformed input data."""


class NumericError(FaceRestoreError):
    """Non-finite values encountered where finite ones are required."""
