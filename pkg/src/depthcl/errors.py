"""Shared exception types.

Exit-code mapping used by the CLI: config problems -> 2, numeric
failures -> 3, I/O and file-format problems -> 4.
"""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class NumericError(RuntimeError):
    """A computation produced non-finite values (NaN/Inf)."""


class ConfigError(ValueError):
    """A run configuration is missing fields or inconsistent."""


class GenerationError(RuntimeError):
    """A domain spec cannot be realized (e.g. geometry behind camera)."""


class DataFormatError(IOError):
    """Base class for dataset container read failures."""


class VersionError(DataFormatError):
    """Container was written with an unsupported format version."""


class TruncatedFileError(DataFormatError):
    """Container ends before the declared payload/header is complete."""


class ChecksumError(DataFormatError):
    """Payload bytes do not match the stored checksum."""


class EmptyMaskError(ValueError):
    """A frame has no valid ground-truth points inside the range cap."""


class UndefinedMetricError(ValueError):
    """A sequence metric is undefined for this record (e.g. N < 2)."""
