"""Exception types raised across the package."""


class RankDistillError(Exception):
    """Base class for all package errors."""


class ZeroVectorError(RankDistillError, ValueError):
    pass


class NonNormalizedError(RankDistillError, ValueError):
    pass


class EmptyInputError(RankDistillError, ValueError):
    pass


class InvalidParameterError(RankDistillError, ValueError):
    """A hyper-parameter is outside its valid range (alpha, tau, C, batch size...)."""


class IndexOutOfRangeError(RankDistillError, IndexError):
    pass


class AsymmetricInputError(RankDistillError, ValueError):
    pass


class LengthMismatchError(RankDistillError, ValueError):
    pass


class ShapeMismatchError(RankDistillError, ValueError):
    pass


class AllQueriesEmptyError(RankDistillError):
    """Every query of a batch has an empty positive set; the batch carries no signal."""


class MissingCacheError(RankDistillError):
    pass


class NonFiniteGradientError(RankDistillError, FloatingPointError):
    pass


class NoQueriesError(RankDistillError, ValueError):
    pass


class RankDeficientError(RankDistillError, ValueError):
    pass


class FileFormatError(RankDistillError, ValueError):
    pass


class BadMagicError(FileFormatError):
    pass


class TruncatedPayloadError(FileFormatError):
    pass


class DimMismatchError(FileFormatError):
    pass


class InfeasibleSpecError(RankDistillError, RuntimeError):
    pass
