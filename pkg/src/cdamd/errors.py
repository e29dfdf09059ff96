"""Exception hierarchy shared by every cdamd module."""


class CDAMDError(Exception):
    """Base class for all library errors."""


class ValidationError(CDAMDError, ValueError):
    """An argument violates a documented precondition."""


class DimensionError(ValidationError):
    """Tensor shapes do not agree."""


class ConfigError(ValidationError):
    """A configuration value is out of range."""


class MaskContractError(ValidationError):
    """An attention mask leaves some query row with nothing to attend to."""


class FormatError(CDAMDError, ValueError):
    """A file does not follow its declared on-disk format."""


class TruncatedFileError(FormatError, OSError):
    """A file ended before the payload its header announced."""


class CheckpointError(CDAMDError, OSError):
    """A checkpoint is missing or cannot be read."""


class TrainingError(CDAMDError, RuntimeError):
    """Optimisation diverged."""

    def __init__(self, message, last_good_state=None):
        super().__init__(message)
        self.last_good_state = last_good_state


class GenerationError(CDAMDError, RuntimeError):
    """Sampling produced non-finite latents."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class NumericError(CDAMDError, ArithmeticError):
    """A numerical routine met an input it cannot handle."""
