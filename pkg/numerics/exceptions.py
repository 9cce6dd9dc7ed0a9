class NumericsError(ValueError):
    """Base class for numerical failures."""


class DomainError(NumericsError):
    """Argument outside the mathematical domain of a function."""


class NotPositiveDefiniteError(NumericsError):
    """Matrix is not symmetric positive definite (usually a collinear design)."""


class ConvergenceFailure(NumericsError):
    """Iterative evaluation did not converge within its iteration budget."""
