"""Exception hierarchy shared across the pipeline."""


class MaskelError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MaskelError, ValueError):
    """Invalid configuration value, range or section."""


class ShapeError(MaskelError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ValidationError(MaskelError, ValueError):
    """An image violates the ImageTensor invariants."""


class StepOutOfRange(MaskelError, IndexError):
    """A chain step index outside ``1..T``."""


class TrainingError(MaskelError, RuntimeError):
    """Training aborted (non-finite loss, bad dataset)."""


class CheckpointError(MaskelError):
    """Unreadable, corrupt or incompatible checkpoint container."""


class DatasetError(MaskelError):
    """Base class for dataset persistence problems."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class MissingFileError(DatasetError, FileNotFoundError):
    pass


class CorruptImageError(DatasetError):
    pass


class ManifestVersionError(DatasetError):
    pass
