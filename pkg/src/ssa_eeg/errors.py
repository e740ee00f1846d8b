"""Exception types raised across the pipeline."""


class SsaEegError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(SsaEegError):
    pass


class ShapeError(SsaEegError, ValueError):
    pass


class DegenerateChannelError(SsaEegError):
    """A channel has zero variance (typically a dead electrode)."""


class NyquistError(SsaEegError, ValueError):
    pass


class EmptySegmentation(SsaEegError):
    pass


class WindowTooLarge(SsaEegError, ValueError):
    pass


class NumericError(SsaEegError, ArithmeticError):
    pass


class DegenerateSpectrum(SsaEegError):
    pass


class InvalidGroupCount(SsaEegError, ValueError):
    pass


class NoDataError(SsaEegError):
    pass


class CacheError(SsaEegError):
    """Backward was called without a matching training-mode forward."""


class ClassImbalanceError(SsaEegError):
    pass


class InvalidFolds(SsaEegError, ValueError):
    pass


class SpecError(SsaEegError, ValueError):
    pass


class ConfigError(SsaEegError, ValueError):
    pass
