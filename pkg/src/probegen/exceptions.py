"""Exception hierarchy shared by all probegen modules."""


class ProbeGenError(Exception):
    """Base class for every error raised by probegen."""


class ShapeError(ProbeGenError, ValueError):
    """An operation received an array of the wrong shape."""


class NonFiniteError(ProbeGenError, FloatingPointError):
    """A computation produced NaN or infinite values."""


class GraphStateError(ProbeGenError, RuntimeError):
    """A graph was used out of order (e.g. backward before evaluate)."""


class ConfigError(ProbeGenError, ValueError):
    """Invalid or incompatible configuration."""


class ContractError(ProbeGenError, ValueError):
    """An operation was called on an object it is not defined for."""


class DataFormatError(ProbeGenError, ValueError):
    """A file does not follow its declared binary or text format."""


class TruncatedFileError(DataFormatError):
    """A file ended before its header said it would."""


class ConsistencyError(DataFormatError):
    """Two related files disagree (e.g. image and label counts)."""


class ChecksumError(DataFormatError):
    """A stored CRC32 does not match the file contents."""


class VersionError(DataFormatError):
    """A file declares a format version this library cannot read."""
