"""Shared exception types."""


class ConfigError(ValueError):
    """A scenario, partition, or market configuration is not realizable."""
