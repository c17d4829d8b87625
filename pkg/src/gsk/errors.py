"""Exception hierarchy shared across the package.

Every failure the library raises deliberately derives from GskError so
callers can fence the toolkit off with a single except clause. The leaf
classes mirror the distinct failure modes of the pipeline: shape/mode
mismatches, model lifecycle misuse, dataset and checkpoint integrity,
container parsing, and training blow-ups.
"""

from __future__ import annotations


class GskError(Exception):
    """Base class for all deliberate failures raised by this package."""


class LengthMismatchError(GskError, ValueError):
    """Two sequences that must share a length do not."""


class EmptyInputError(GskError, ValueError):
    """An operation received an empty sequence where content is required."""


class ModeMismatchError(GskError, ValueError):
    """Ciphertext mode disagrees with the model or container mode."""


class UntrainedModelError(GskError, RuntimeError):
    """Generation was requested from a model with no optimizer updates."""


class NonFiniteLossError(GskError, RuntimeError):
    """Training produced NaN/inf; carries a snapshot of the recent log."""

    def __init__(self, message: str, log_tail=()):
        super().__init__(message)
        self.log_tail = tuple(log_tail)


class DatasetMissingError(GskError, ValueError):
    """Training dataset absent or below the required size."""


class MissingSplitError(GskError, ValueError):
    """A required dataset split (train/test) was not supplied."""


class MissingFilesError(GskError, FileNotFoundError):
    """Expected dataset files are not present on disk."""


class MalformedIdxError(GskError, ValueError):
    """An IDX file failed structural validation (magic, dims, size)."""


class ChecksumMismatchError(GskError, ValueError):
    """File contents do not match the recorded or canonical checksum."""


class KindMismatchError(GskError, ValueError):
    """A checkpoint holds a different model kind than the loader expects."""


class UnknownVersionError(GskError, ValueError):
    """Container magic or format version is not recognized."""


class TruncatedPayloadError(GskError, ValueError):
    """A serialized container ends before its declared payload does."""


class KeyParseError(GskError, ValueError):
    """Extraction-key bytes are structurally invalid."""


class ImageTooSmallError(GskError, ValueError):
    """Cover image has fewer pixels than the identification code needs."""


class UnsupportedImageError(GskError, ValueError):
    """Cover file is not a lossless 8-bit grayscale PNG."""


class SchemaViolationError(GskError, ValueError):
    """Configuration file violates the schema; lists every offending key."""

    def __init__(self, violations):
        self.violations = tuple(violations)
        super().__init__(
            "configuration schema violations: " + "; ".join(self.violations)
        )


class EmptyLogError(GskError, ValueError):
    """A training log with no entries cannot be exported."""


class EmptyReportError(GskError, ValueError):
    """An evaluation over zero samples would produce an empty report."""
