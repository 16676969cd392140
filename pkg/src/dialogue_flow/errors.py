"""Exception types raised across the package."""


class DialogueFlowError(Exception):
    """Base class for all package errors."""


class DataError(DialogueFlowError):
    """Malformed or inconsistent input data."""


class ConfigError(DialogueFlowError):
    """Invalid configuration value."""


class NumericError(DialogueFlowError):
    """A computation produced NaN or Inf."""


class InvalidTranscript(DataError):
    pass


class UnknownCharacter(DataError):
    pass


class SegmentTooDense(DataError):
    pass


class SameSpeakerOverlap(DataError):
    pass


class EmptyText(DataError):
    pass


class NegativeTime(DataError):
    pass


class NoCandidate(DataError):
    pass


class NoPrompt(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class AllMasked(DataError):
    pass


class UnknownTimbre(DataError):
    pass


class InvalidSpec(ConfigError):
    pass


class InvalidWeights(ConfigError):
    pass


class OutOfRange(ConfigError):
    pass


class NonPositive(DataError):
    pass


class AllSilent(DataError):
    pass


class EmptyEvalSet(DataError):
    pass


class NonFinite(NumericError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class IoError(DataError):
    """A file or directory could not be read or written."""
