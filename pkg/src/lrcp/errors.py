"""Exception hierarchy. Each family maps to its own CLI exit code."""


class LRCPError(Exception):
    exit_code = 1


class ContractError(LRCPError, ValueError):
    """Shapes or dimensions do not line up."""

    exit_code = 2


class ConfigError(LRCPError, ValueError):
    exit_code = 3


class DegenerateInputError(LRCPError, ValueError):
    """Input is well-formed but the quantity asked for is undefined on it."""

    exit_code = 4


class EmptyClusterError(DegenerateInputError):
    pass


class UninitializedModelError(LRCPError, RuntimeError):
    exit_code = 5


class IncompleteMatrixError(LRCPError, ValueError):
    exit_code = 6


class UndefinedMetricError(LRCPError, ValueError):
    exit_code = 6


class GenerationError(LRCPError, RuntimeError):
    exit_code = 7


class BufferFormatError(LRCPError, IOError):
    exit_code = 8


class BufferIOError(BufferFormatError):
    pass


class BufferVersionError(BufferFormatError):
    pass


class BufferChecksumError(BufferFormatError):
    pass


class FeatureFileError(LRCPError, IOError):
    exit_code = 9


class LengthMismatchError(FeatureFileError):
    pass


class MalformedHeaderError(FeatureFileError):
    pass


class NonFiniteValueError(FeatureFileError):
    pass
