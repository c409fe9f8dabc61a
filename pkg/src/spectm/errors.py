"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: config errors exit 2, data errors 3,
numeric failures 4.
"""


class SpecTMError(Exception):
    exit_code = 1


class ConfigError(SpecTMError):
    """Bad run configuration: unknown keys, invalid values, missing files."""

    exit_code = 2


class DataError(SpecTMError):
    """Malformed input data: band tables, datasets, checkpoints, schemas."""

    exit_code = 3


class NumericError(SpecTMError):
    """Non-finite values or numerically impossible requests during training."""

    exit_code = 4
