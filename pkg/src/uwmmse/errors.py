"""Exception hierarchy shared across the package."""


class UwmmseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(UwmmseError, ValueError):
    """Invalid dimensions, hyperparameters or flag values."""


class DatasetFormatError(UwmmseError):
    """A dataset file could not be parsed."""


class BadMagicError(DatasetFormatError):
    pass


class VersionMismatchError(DatasetFormatError):
    pass


class TruncatedPayloadError(DatasetFormatError):
    pass


class CheckpointFormatError(UwmmseError):
    """A checkpoint document is malformed or has an unsupported version."""


class SingularityError(UwmmseError, ArithmeticError):
    """A per-user matrix that must be inverted is singular."""

    def __init__(self, message, user=None):
        super().__init__(message)
        self.user = user


class DomainError(UwmmseError, ValueError):
    """Input outside the mathematical domain of an operation."""


class TrainingError(UwmmseError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message, sample=None, parameter=None, state=None):
        super().__init__(message)
        self.sample = sample
        self.parameter = parameter
        self.state = state
