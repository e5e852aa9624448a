class ColaError(Exception):
    """Base class for every error raised by the cola package."""


class DimensionError(ColaError, ValueError):
    """Raised when tensor, layer or adapter shapes do not agree."""


class LabelError(ColaError, ValueError):
    """Raised when a class label falls outside [0, C)."""


class NonFiniteError(ColaError, ArithmeticError):
    """Raised when an operation produces NaN or Inf."""


class TapeError(ColaError, RuntimeError):
    """Raised on misuse of a Tape (reuse, non-scalar loss, foreign values)."""


class NotMergeableError(ColaError, TypeError):
    """Raised when an adapter that is not linear in its input is merged."""


class MergeStateError(ColaError, RuntimeError):
    """Raised on merge without unmerge, or unmerge without merge."""


class EmptyBufferError(ColaError, RuntimeError):
    """Raised when an adaptation is requested with no buffered records."""


class ConfigError(ColaError, ValueError):
    """Raised for invalid configuration files or values."""


class OffloadError(ColaError, RuntimeError):
    """Raised when an offload worker reports a failure."""


class OffloadTimeoutError(OffloadError, TimeoutError):
    """Raised when an offload worker does not answer in time."""


class BadMagicError(ColaError, ValueError):
    """Raised when a binary file starts with an unexpected magic number."""

    def __init__(self, expected, found):
        super().__init__(f"Magic number mismatch: expected {expected!r}, found {found!r}")
        self.expected = expected
        self.found = found


class TruncatedFileError(ColaError, ValueError):
    """Raised when a binary file ends before its header says it should."""


class CheckpointVersionError(ColaError, ValueError):
    """Raised when a checkpoint was written by an unsupported format version."""
