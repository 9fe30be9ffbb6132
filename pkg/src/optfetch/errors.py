"""Shared exception types."""


class OptfetchError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(OptfetchError, ValueError):
    """Array input does not match the expected dimensions."""


class ConfigError(OptfetchError, ValueError):
    """A configuration value or file is invalid."""


class GraphError(OptfetchError, ValueError):
    """A task graph is structurally broken (cycles, dangling refs)."""


class CheckpointError(OptfetchError, RuntimeError):
    """A checkpoint file cannot be read or does not match the domain."""
