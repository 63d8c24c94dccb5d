"""Exception types shared across the package."""


class ZogpError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(ZogpError, ValueError):
    """An argument violates a documented precondition."""


class NumericalError(ZogpError, ArithmeticError):
    """A numerical routine failed (factorization, Newton non-convergence, ...)."""

    def __init__(self, message, residual=None, diagnostic=None):
        super().__init__(message)
        self.residual = residual
        self.diagnostic = diagnostic


class UnsupportedConfigurationError(ZogpError):
    """The requested solver/problem combination is not supported."""


class QpInfeasibleError(ZogpError):
    """A QP subproblem was reported infeasible."""

    def __init__(self, message, qp=None):
        super().__init__(message)
        self.qp = qp
