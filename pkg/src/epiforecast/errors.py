"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes (config 2, data 3, numerical 4), so
raise the most specific type that applies.
"""


class EpiforecastError(Exception):
    """Base class for all package errors."""


class DimensionError(EpiforecastError, ValueError):
    """Array shapes do not conform for an operation."""


class ConfigError(EpiforecastError, ValueError):
    """A configuration value is invalid or inconsistent (bad window size,
    unknown ablation variant, unknown config key, ...)."""


class DataError(EpiforecastError, ValueError):
    """Ingested data violates the schema (ragged rows, negative counts,
    non-numeric cells) or is insufficient for the requested fit."""


class GradientError(EpiforecastError, RuntimeError):
    """Misuse of the tape/backward machinery: non-scalar root, detached
    root, double backward, or a parameter missing its gradient."""


class DivergenceError(EpiforecastError, RuntimeError):
    """Training produced a non-finite loss."""
