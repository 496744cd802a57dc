"""Error types raised by the library.

Everything that indicates bad input data (as opposed to a programming
mistake) derives from :class:`DataError`, so callers such as the CLI can
map the whole family to a single exit status.
"""


class DataError(Exception):
    """Base class for invalid input data or files."""


class MalformedFileError(DataError):
    """A structured input file could not be parsed."""


class OutOfBoundsError(DataError):
    """A coordinate lies outside the image rectangle."""


class NonFiniteError(DataError):
    """A value that must be finite is NaN or infinite."""


class EmptyPointSetError(DataError):
    """An operation requires at least one point."""


class NonPositiveSigmaError(DataError):
    """A Gaussian width must be strictly positive."""


class MalformedHeaderError(DataError):
    """A raster file header is syntactically invalid."""


class UnsupportedMaxvalError(DataError):
    """A PGM file declares a maxval other than 255."""


class UnsupportedEndiannessError(DataError):
    """A PFM file declares big-endian storage."""


class TruncatedDataError(DataError):
    """A raster payload ends before width*height samples."""


class NonFiniteValueError(DataError):
    """A float raster contains NaN or infinite samples."""


class CenterOutOfBoundsError(DataError):
    """A kernel center lies outside the target grid."""


class ShapeMismatchError(DataError):
    """Two arrays that must share a shape do not."""


class PasteOutOfBoundsError(DataError):
    """A paste position falls outside the image."""


class NonBinaryMaskError(DataError):
    """A mask that must be 0/1-valued contains other values."""


class ProbsNotNormalizedError(DataError):
    """A probability vector has negative entries or does not sum to 1."""


class NonNegativeViolationError(DataError):
    """A weight vector that must be non-negative contains negatives."""


class MassMismatchError(DataError):
    """A measure has zero total mass and cannot be normalized."""


class EmptySetError(DataError):
    """A metric was asked to aggregate zero records."""


class TooFewRecordsError(DataError):
    """Not enough records to form the requested split."""


class EmptyDatasetError(DataError):
    """A training or labeling routine received no samples."""


class MissingAuxiliaryError(DataError):
    """Distillation requires a frozen auxiliary model."""


class BadMagicError(DataError):
    """A model file does not start with the expected magic bytes."""


class VersionMismatchError(DataError):
    """A model file declares an unsupported format version."""


class SizeMismatchError(DataError):
    """A model file's tensors do not match the expected layout."""
