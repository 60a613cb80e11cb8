"""Exception hierarchy shared by every marsrl module."""


class MarsError(Exception):
    """Base class for all marsrl errors."""


class ShapeMismatch(MarsError, ValueError):
    pass


class NonFiniteInput(MarsError, ValueError):
    pass


class NonFiniteAction(NonFiniteInput):
    pass


class NonFiniteState(NonFiniteInput):
    pass


class NonFiniteGradient(MarsError, FloatingPointError):
    pass


# data ingestion -----------------------------------------------------------

class DataError(MarsError, ValueError):
    """Raised for malformed or unusable market data."""


class MissingColumn(DataError):
    pass


class NonPositivePrice(DataError):
    pass


class InvalidBar(DataError):
    """OHLC bar violating high >= max(open, close) >= min(open, close) >= low."""


class DuplicateDateSymbol(DataError):
    pass


class IncompleteCoverage(DataError):
    pass


class InsufficientHistory(DataError):
    pass


class DegenerateFeature(DataError):
    pass


class OverlappingSpans(DataError):
    pass


class SpanOutOfRange(DataError):
    pass


# environment / risk -------------------------------------------------------

class InsufficientData(MarsError, ValueError):
    pass


class NegativeWeight(MarsError, ValueError):
    pass


# learning -----------------------------------------------------------------

class EmptyBatch(MarsError, ValueError):
    pass


class BatchTooSmall(MarsError, ValueError):
    pass


class LabelOutOfRange(MarsError, ValueError):
    pass


class BufferUnderfilled(MarsError, ValueError):
    pass


# orchestration ------------------------------------------------------------

class ConfigError(MarsError, ValueError):
    pass


class ArchitectureMismatch(MarsError, ValueError):
    pass


class CurveTooShort(MarsError, ValueError):
    pass


class TrainingAborted(MarsError, RuntimeError):
    """A loss or parameter went non-finite during training."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class IoFailure(MarsError, OSError):
    pass
