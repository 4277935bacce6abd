"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class CorruptDatasetError(RuntimeError):
    """A dataset directory is missing files or fails its integrity checks."""


class CorruptCheckpointError(RuntimeError):
    """A checkpoint cannot be read, or its hashes/version do not match."""


class DegenerateBatchError(ValueError):
    """The entropy estimator cannot work with the given batch."""


class UndefinedMetricError(ValueError):
    """The requested metric is undefined for the inputs (e.g. empty masks)."""


class NonFiniteLossError(FloatingPointError):
    """A loss component became NaN or infinite.

    ``components`` maps component names to their (possibly non-finite) values.
    """

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})


class RegistrationError(FloatingPointError):
    """Registration produced a non-finite intermediate."""


class TrainingAborted(RuntimeError):
    """Training stopped on a numeric failure; points at the last good checkpoint."""

    def __init__(self, message, last_checkpoint=None, components=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.components = dict(components or {})
