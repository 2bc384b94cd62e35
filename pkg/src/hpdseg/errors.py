"""Exception hierarchy shared by every module."""


class HpdError(Exception):
    """Base class for all library errors."""


class ShapeError(HpdError, ValueError):
    """Tensor extents are inconsistent with the operation."""


class ArgumentError(HpdError, ValueError):
    """A scalar argument is outside its valid range."""


class ConfigError(HpdError, ValueError):
    """A network, training or dataset configuration is invalid."""


class DataError(HpdError, ValueError):
    """Input data violates its contract (labels out of range, empty set, ...)."""


class UsageError(HpdError, RuntimeError):
    """An API was called in the wrong state, e.g. backward on an inference cache."""


class DegenerateBatchError(HpdError, ValueError):
    """Batch statistics requested over fewer than two elements."""


class TensorFileError(DataError):
    """Base class for container load failures."""


class BadMagicError(TensorFileError):
    pass


class VersionError(TensorFileError):
    pass


class RankError(TensorFileError):
    pass


class DtypeCodeError(TensorFileError):
    pass


class LengthError(TensorFileError):
    """File is shorter or longer than its header implies."""


class ChecksumError(TensorFileError):
    pass
