"""Exception hierarchy shared by every sstune module."""


class SSTuneError(Exception):
    """Base class for all library errors."""


class ZeroVector(SSTuneError, ValueError):
    pass


class NonPositiveTemperature(SSTuneError, ValueError):
    pass


class LengthMismatch(SSTuneError, ValueError):
    pass


class KOutOfRange(SSTuneError, ValueError):
    pass


class DimMismatch(SSTuneError, ValueError):
    pass


class EmptySelection(SSTuneError, ValueError):
    pass


class IndexOutOfRange(SSTuneError, IndexError):
    pass


class ShapeMismatch(SSTuneError, ValueError):
    pass


class InvariantViolation(SSTuneError, ValueError):
    pass


class SchemaMismatch(SSTuneError, ValueError):
    pass


class CorruptBlob(SSTuneError, ValueError):
    pass


class IoFailure(SSTuneError, OSError):
    pass


class MissingVideo(SSTuneError, KeyError):
    pass


class FactorabilityViolation(SSTuneError, ValueError):
    pass


class DegenerateClass(SSTuneError, ValueError):
    pass


class BundleInconsistency(SSTuneError, ValueError):
    pass


class NonFiniteLoss(SSTuneError, FloatingPointError):
    """Raised when a tuning step produces a NaN/Inf loss.

    The partial trace collected so far is attached as ``trace``.
    """

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
