class SruError(Exception):
    """Base class for errors raised by srukit."""


class DimensionError(SruError, ValueError):
    pass


class ParameterError(SruError, ValueError):
    pass


class ConsistencyError(SruError, ValueError):
    """A tape does not belong to the configuration/parameters it is used with."""


class NonFiniteError(SruError, ArithmeticError):
    def __init__(self, message: str, index=None, step=None):
        super().__init__(message)
        self.index = index
        self.step = step


class CorpusError(SruError, ValueError):
    pass


class CheckpointError(SruError):
    code = "E_CHECKPOINT"


class CheckpointVersionError(CheckpointError):
    code = "E_VERSION"


class TruncatedPayloadError(CheckpointError):
    code = "E_TRUNCATED"


class ShapeMismatchError(CheckpointError):
    code = "E_SHAPE"
