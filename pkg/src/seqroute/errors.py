"""Shared error types for input validation and configuration."""


class InputError(ValueError):
    """Caller-supplied data violates a precondition."""


class ConfigError(Exception):
    """Experiment or run configuration is invalid or incomplete."""
