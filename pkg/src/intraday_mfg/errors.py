"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain where a quantity is defined."""


class SingularMatrixError(ArithmeticError):
    """A matrix that must be inverted is numerically singular.

    ``time`` carries the grid time at which the singular matrix appeared,
    when there is one.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class GridMismatchError(ValueError):
    """Two path-valued objects live on different time grids."""
