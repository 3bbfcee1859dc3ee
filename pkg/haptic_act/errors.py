"""Exception hierarchy shared by the library and the command-line interface."""

from typing import Optional


class HapticActError(Exception):
    """Base class for all errors raised by haptic_act."""

    exit_code = 1


class ConfigurationError(HapticActError):
    """Raised when a configuration value is invalid or unusable."""

    exit_code = 2


class DimensionError(HapticActError, ValueError):
    """Raised when tensor or observation shapes do not agree."""

    exit_code = 3


class ContractError(HapticActError):
    """Raised when an operation is called outside its preconditions."""

    exit_code = 4


class NumericError(HapticActError):
    """Raised when a computation produces non-finite values."""

    exit_code = 5


class TrainingAbortedError(NumericError):
    """Raised when training hits a non-finite loss."""

    def __init__(self, step: int, message: str, condition: Optional[str] = None):
        self.step = step
        self.reason = message
        self.condition = condition
        prefix = f"[{condition}] " if condition else ""
        super().__init__(f"{prefix}training aborted at step {step}: {message}")


class GenerationError(HapticActError):
    """Raised when the scripted expert keeps failing to produce a usable episode."""

    exit_code = 6


class DatasetFormatError(HapticActError):
    """Raised when a dataset or checkpoint on disk cannot be read back."""

    exit_code = 7


class FormatVersionError(DatasetFormatError):
    """Raised when an on-disk format version is not supported."""


class ChecksumError(DatasetFormatError):
    """Raised when a file does not match the checksum recorded for it."""

    def __init__(self, path: str, expected: str, actual: str):
        self.path = path
        super().__init__(
            f"Checksum mismatch for {path}: expected {expected[:12]}..., got {actual[:12]}..."
        )


class TruncatedFileError(DatasetFormatError):
    """Raised when a binary file is shorter than its recorded size."""


class CheckpointError(DatasetFormatError):
    """Raised when a model checkpoint is malformed."""


class OutputError(HapticActError):
    """Raised when results cannot be written."""

    exit_code = 8
