"""Exception hierarchy shared across the package."""


class KFGNError(Exception):
    """Base class for all package errors."""


class ContractError(KFGNError, ValueError):
    """An input violates a documented precondition (shape, symmetry, sign)."""


class SingularMatrixError(KFGNError, ArithmeticError):
    """Cholesky factorisation failed even after jitter escalation."""


class NumericBreakdownError(KFGNError, ArithmeticError):
    """A non-finite value appeared during an iterative computation."""


class NegativeCurvatureError(NumericBreakdownError):
    """Conjugate gradients met p^T A p <= 0, so the operator is not PSD."""


class CurvatureBreakdownError(NumericBreakdownError):
    """The line-search denominator was not strictly positive."""


class DegenerateCurvatureError(KFGNError, ArithmeticError):
    """A Kronecker factor has zero trace."""


class SizeError(KFGNError, ValueError):
    """A dense object would exceed the configured size cap."""


class ParseError(KFGNError, ValueError):
    """Malformed binary input (IDX or parameter container)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(KFGNError, ValueError):
    """Invalid or unknown training configuration."""
