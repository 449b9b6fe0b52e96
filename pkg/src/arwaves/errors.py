from typing import Optional, Tuple


class CapacityError(ValueError):
    """Input exceeds a documented enumeration or brute-force budget."""


class DomainError(ValueError):
    """A mathematical precondition of an operation is violated."""


class GeometryError(ValueError):
    """Surface does not fit strictly inside one fundamental cell."""


class RegularityError(GeometryError):
    """Degenerate parametrization (vanishing area element)."""


class ResolutionError(ValueError):
    """Mesh, quadrature or cell resolution too coarse for the request."""


class ConfigError(ValueError):
    """Unparseable configuration, message anchored as ``path:line: reason``."""


class NumericError(ArithmeticError):
    """Numerical procedure failed to converge or a numeric check failed.

    Parameters
    ----------
    msg : str
        Error message.
    values : tuple of float, optional
        The last two iterates of the procedure that failed to converge.
    """

    def __init__(self, msg: str, values: Optional[Tuple[complex, complex]] = None):
        super().__init__(msg)
        self.values = values


class MatrixError(NumericError):
    """Covariance matrix is not positive definite."""


class NearSingularError(NumericError):
    """Correlation too close to one for the conditioned Gaussian law."""
