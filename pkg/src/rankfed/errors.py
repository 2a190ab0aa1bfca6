"""Exception types shared across the package."""


class RankfedError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(RankfedError):
    """Operands have incompatible or unexpected shapes."""


class ParameterError(RankfedError):
    """A configuration or call parameter is out of its valid range."""


class InputError(RankfedError):
    """Input data violates a precondition (empty batch, bad label, ...)."""


class InvariantError(RankfedError):
    """A documented invariant was violated (negative importance, bad weights, ...)."""


class NumericError(RankfedError):
    """A computation produced non-finite values."""


class ProtocolError(RankfedError):
    """Client/server exchange violated the round protocol (e.g. rank mismatch)."""


class UndefinedMetricError(RankfedError):
    """A metric is undefined for the given input (single-class AUC, constant CKA input)."""
