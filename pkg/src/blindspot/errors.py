"""Shared exception types.

The command line maps these onto exit codes (see cli.py): validation
errors exit with 1, file format and I/O errors exit with 2.
"""


class ValidationError(ValueError):
    """Caller passed an argument outside the documented contract."""


class DimensionError(ValidationError):
    """Array shapes are incompatible for the requested operation."""


class EmptyReportError(ValidationError):
    """A pipeline ended up with no evaluable examples."""


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""


class FileFormatError(OSError):
    """A binary file does not match its declared layout."""


class BadMagicError(FileFormatError):
    """Leading magic bytes identify a different file type."""


class VersionMismatchError(FileFormatError):
    """The file was written with an unsupported format version."""


class TruncatedError(FileFormatError):
    """The payload is shorter (or longer) than the header promises."""
