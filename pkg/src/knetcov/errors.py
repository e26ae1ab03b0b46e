"""Exception types shared across the package."""


class ContractError(ValueError):
    """Inputs violate a shape or domain precondition."""


class NumericError(ArithmeticError):
    """A computation produced a singular system or non-finite values."""


class SingularInnovationError(NumericError):
    """The innovation covariance S could not be inverted."""

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition number {condition:.3e})")
        self.condition = condition


class GainBoundaryError(NumericError):
    """``I - H K`` is singular or too ill-conditioned to invert.

    This happens when the gain trusts the observation (almost) completely,
    which maps to an unbounded prior covariance.
    """


class UnsupportedGeometryError(ContractError):
    """The observation matrix does not have full column rank."""


class DivergenceError(NumericError):
    """A filter or training run produced non-finite values."""


class ConvergenceError(NumericError):
    """An iterative solver did not reach its tolerance."""
