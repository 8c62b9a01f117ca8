"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Array or tensor shapes are incompatible."""


class StateError(RuntimeError):
    """An operation was requested on a model or artifact in the wrong state."""


class SequenceLengthError(ValueError):
    """A decoder input would exceed the configured maximum length."""


class ConsistencyError(RuntimeError):
    """Persisted artifacts disagree with each other (digests, dimensions)."""


class LoadError(IOError):
    """A persisted file could not be read back. Carries the offending item id."""

    def __init__(self, item_id: str, reason: str):
        super().__init__(f"{item_id}: {reason}")
        self.item_id = item_id
        self.reason = reason


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or otherwise failed."""
