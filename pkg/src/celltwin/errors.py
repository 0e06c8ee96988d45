"""Shared exception types. Messages name the offending field/key where applicable."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown key."""


class DomainError(ValueError):
    """Argument outside the function's domain."""


class ShapeError(ValueError):
    """Array shape does not match the declared interface."""


class FormatError(ValueError):
    """Persisted file is corrupt or has an incompatible version."""


class TrainingError(RuntimeError):
    """Non-finite loss or gradients during optimization."""


class ModelError(RuntimeError):
    """Model unusable for the requested operation (untrained, layout mismatch)."""


class CellAsleepError(RuntimeError):
    """A sleeping cell was queried for a signal it cannot emit."""


class UnknownIdError(LookupError):
    """Cell id or grid index not present in the scenario."""
