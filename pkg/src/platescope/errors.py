"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: missing files exit 2,
ConfigError exits 3, every other PlatescopeError exits 4.
"""


class PlatescopeError(Exception):
    """Base class for all package errors."""


class ShapeError(PlatescopeError):
    """Operands have incompatible shapes; message names the offenders."""


class NumericError(PlatescopeError):
    """A numeric precondition failed (zero-norm row, non-finite gradient)."""


class ConfigError(PlatescopeError):
    """Malformed or unknown configuration."""


class DataFormatError(PlatescopeError):
    """Base class for on-disk format violations."""


class BadMagicError(DataFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(DataFormatError):
    """File ends before the declared payload does."""


class ChecksumError(DataFormatError):
    """Payload CRC32 does not match the stored checksum."""
