"""Shared exception types."""


class BudgetError(RuntimeError):
    """A requested computation exceeds a declared size or work budget."""

    def __init__(self, message: str, count=None, limit=None):
        super().__init__(message)
        self.count = count
        self.limit = limit


class SingularityError(ValueError):
    """A resolvent was requested at (numerically) an eigenvalue.

    `distance` is the distance from z to the nearest eigenvalue: exact when
    a dense eigendecomposition was affordable, otherwise the rigorous upper
    bound 1/||w|| from the attempted solve.
    """

    def __init__(self, message: str, distance: float):
        super().__init__(message)
        self.distance = distance


class ContourGeometryError(ValueError):
    """Contour for the block convolution would enclose or touch a pole."""
