"""Exception hierarchy shared by every module of the package."""


class DisVAEError(Exception):
    """Base class for all package errors."""


class ShapeError(DisVAEError, ValueError):
    pass


class NumericError(DisVAEError, ArithmeticError):
    """A forward op produced NaN or infinity."""


class WavFormatError(DisVAEError, ValueError):
    pass


class SampleRateError(DisVAEError, ValueError):
    pass


class SignalLengthError(DisVAEError, ValueError):
    pass


class FilterbankError(DisVAEError, ValueError):
    pass


class StatsError(DisVAEError, ValueError):
    pass


class ParameterError(DisVAEError, ValueError):
    pass


class StateError(DisVAEError, RuntimeError):
    pass


class ManifestError(DisVAEError, ValueError):
    pass


class DomainError(DisVAEError, ValueError):
    """Input lives in the wrong value domain (e.g. normalized vs log-mel)."""


class CheckpointError(DisVAEError, ValueError):
    pass


class ConfigError(DisVAEError, ValueError):
    pass


class TrainingError(DisVAEError, RuntimeError):
    pass
