"""Error taxonomy; the CLI maps these onto exit-code categories."""


class GrindplanError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(GrindplanError):
    """Invalid, unknown, or inconsistent configuration."""

    exit_code = 2


class DataError(GrindplanError):
    """Missing, truncated, or incompatible data artifacts."""

    exit_code = 3


class ModelError(GrindplanError):
    """Model misuse: untrained models, checkpoint or shape mismatches."""

    exit_code = 4
