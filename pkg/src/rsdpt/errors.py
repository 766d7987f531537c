"""Exception types shared across the package."""


class RsdptError(Exception):
    """Base class for package errors."""


class DataError(RsdptError, ValueError):
    """Malformed or invalid input data."""


class ConfigError(RsdptError, ValueError):
    """Inconsistent configuration, rejected before any work starts."""
