"""Exception types shared across the package."""


class SparseMergeError(Exception):
    """Base class for all package errors."""


class InputError(SparseMergeError, ValueError):
    """An argument is out of range or otherwise invalid."""


class DimensionError(SparseMergeError, ValueError):
    """Matrix shapes do not agree."""


class NumericError(SparseMergeError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer


class TrainingError(SparseMergeError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class FormatError(SparseMergeError, ValueError):
    """A persisted file is corrupt or has the wrong magic/version."""


class BadMagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class VersionError(FormatError):
    """The file was written by an unsupported format version."""
