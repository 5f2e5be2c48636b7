"""Shared exception types. CLI maps ConfigError to exit 1, NumericError to 2."""


class ConfigError(ValueError):
    """Invalid configuration, shapes, or command usage."""


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required (aborts training)."""


class CheckpointError(ValueError):
    """Missing, corrupt, or wrong-version checkpoint file."""


class DumpFormatError(ValueError):
    """Malformed line in a serialized prediction / annotation dump."""
