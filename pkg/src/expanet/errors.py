"""Exception hierarchy shared by every stage of the pipeline."""


class ExpanetError(Exception):
    """Base class for all errors raised by this package."""


# -- data / io ---------------------------------------------------------------
class DataError(ExpanetError):
    pass


class MissingChannel(DataError):
    def __init__(self, name):
        super().__init__(f"required channel missing: {name}")
        self.name = name


class CorruptHeader(DataError):
    pass


class NonFiniteSample(DataError):
    def __init__(self, position):
        super().__init__(f"non-finite sample at (channel, sample) = {position}")
        self.position = position


class SampleRateTooLow(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class VersionMismatch(DataError):
    pass


class IoFailure(DataError):
    pass


class StageInputMissing(DataError):
    pass


# -- signal processing / features -------------------------------------------
class SignalError(ExpanetError, ValueError):
    pass


class InvalidBand(SignalError):
    pass


class InvalidCenter(SignalError):
    pass


class UnstableDesign(SignalError):
    pass


class TooShortSignal(SignalError):
    pass


# the feature operations call the same condition "TooShort"
TooShort = TooShortSignal


class ZeroVariance(SignalError):
    pass


class DegenerateSignal(SignalError):
    pass


class SingularFit(SignalError):
    pass


class LengthMismatch(SignalError):
    pass


class InvalidK(SignalError):
    pass


# -- autodiff / model --------------------------------------------------------
class NumericalError(ExpanetError):
    pass


class ShapeMismatch(ExpanetError, ValueError):
    pass


class NonFinite(NumericalError):
    pass


class NonScalarLoss(ExpanetError, ValueError):
    pass


class ConsumedTape(ExpanetError, RuntimeError):
    pass


class IsolatedNode(ExpanetError, ValueError):
    pass


class DivergedLoss(NumericalError):
    pass


# -- evaluation / explanation -------------------------------------------------
class TooFewSubjects(ExpanetError, ValueError):
    pass


class DegenerateDifferences(ExpanetError, ValueError):
    pass


class EmptyGroup(ExpanetError, ValueError):
    pass


class ConfigInvalid(ExpanetError, ValueError):
    pass
