"""Exception hierarchy shared across the package."""


class RdmeflowError(Exception):
    """Base class for all package errors."""


class InvalidGeometryError(RdmeflowError):
    pass


class MeshParseError(RdmeflowError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ModelError(RdmeflowError):
    """Static problem with a model definition."""


class ExpressionError(ModelError):
    """Propensity expression could not be tokenized, parsed or bound."""

    def __init__(self, message, position=None, source=None):
        self.position = position
        self.source = source
        if position is not None:
            message = f"{message} at position {position}"
        super().__init__(message)


class ModelRuntimeError(RdmeflowError):
    """A realization hit an invalid state, e.g. a negative propensity."""

    def __init__(self, message, voxel=None, reaction=None, time=None):
        self.voxel = voxel
        self.reaction = reaction
        self.time = time
        super().__init__(f"{message} (voxel={voxel}, reaction={reaction}, t={time})")


class BudgetExceededError(RdmeflowError):
    pass


class CapacityError(RdmeflowError):
    pass


class TrajectoryFormatError(RdmeflowError):
    code = "format"


class BadMagicError(TrajectoryFormatError):
    code = "bad-magic"


class VersionMismatchError(TrajectoryFormatError):
    code = "version-mismatch"


class SizeMismatchError(TrajectoryFormatError):
    code = "size-mismatch"


class ChecksumError(TrajectoryFormatError):
    code = "checksum"


class SerializationOverflowError(TrajectoryFormatError):
    code = "overflow"


class VarianceUndefinedError(RdmeflowError):
    pass


class PostProcessorError(RdmeflowError):
    pass


class MetricError(RdmeflowError):
    pass


class TaskError(RdmeflowError):
    """A realization task failed after its retry."""

    def __init__(self, message, index=None, seed=None, key=None):
        self.index = index
        self.seed = seed
        self.key = key
        super().__init__(message)
