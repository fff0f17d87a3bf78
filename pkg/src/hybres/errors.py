"""Exception hierarchy shared by every hybres module."""


class HybresError(Exception):
    """Base class for all errors raised by hybres."""


class NetworkError(HybresError):
    """Invalid network data or a degenerate matrix partition."""


class ValidationError(HybresError):
    """A parameter record violates one of its invariants."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NoRealSolutionError(HybresError):
    """The droop quadratic has a negative discriminant (quasi-static voltage collapse)."""


class NonphysicalRootError(HybresError):
    """The positive branch of the droop quadratic gives a non-positive voltage."""


class NoSolutionError(HybresError):
    """No algebraic solution (or no self-consistent combination) at a point."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class BoundaryDegeneracyError(HybresError):
    """Singular residual Jacobian, typically on a switching boundary."""


class ChatteringError(HybresError):
    """Too many mode switches inside a single integration step."""
