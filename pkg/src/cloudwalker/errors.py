"""Exception types shared across the package.

The CLI maps them onto exit codes: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class ConfigError(ValueError):
    """Bad or conflicting run configuration."""


class DataError(ValueError):
    """Malformed input files, degenerate clouds, impossible walk requests."""


class NumericError(ArithmeticError):
    """Non-finite values produced during training or inference."""
