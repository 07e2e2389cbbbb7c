"""Exception types shared across the package."""


class ScarsegError(Exception):
    """Base class for package errors."""


class ConfigError(ScarsegError):
    """Invalid or inconsistent configuration."""


class DataError(ScarsegError):
    """Unreadable, malformed or inconsistent input data."""


class NonFiniteLossError(ScarsegError):
    """Training produced a NaN or infinite loss."""
