"""Exception types raised across the package."""


class ReqError(Exception):
    """Base class for all package errors."""


class NonSquareError(ReqError, ValueError):
    pass


class OutOfBoundsError(ReqError, ValueError):
    pass


class ShapeMismatchError(ReqError, ValueError):
    pass


class UnregisteredPrimitiveError(ReqError, KeyError):
    pass


class ZeroVectorError(ReqError, ValueError):
    pass


class NotNormalizedError(ReqError, ValueError):
    pass


class DegenerateError(ReqError, ValueError):
    pass


class UndefinedRotationError(ReqError, ValueError):
    pass


class TooFewKeypointsError(ReqError, RuntimeError):
    pass


class TooFewMatchesError(ReqError, RuntimeError):
    pass


class NonFiniteLossError(ReqError, FloatingPointError):
    pass


class EmptyCorpusError(ReqError, FileNotFoundError):
    pass


class DimMismatchError(ReqError, ValueError):
    pass


class ConfigError(ReqError, ValueError):
    pass


class FormatError(ReqError, ValueError):
    """A binary or text file does not follow its declared layout."""
