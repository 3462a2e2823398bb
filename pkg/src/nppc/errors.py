"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class NonScalarLoss(ValueError):
    """backward() was asked to differentiate a non-scalar value."""


class DegenerateDirections(RuntimeError):
    """Gram-Schmidt residual collapsed: the input directions are
    (numerically) linearly dependent."""

    def __init__(self, index: int, residual: float, scale: float):
        self.index = index
        self.residual = residual
        self.scale = scale
        super().__init__(
            f"direction {index} is linearly dependent on its predecessors "
            f"(residual {residual:.3e}, reference scale {scale:.3e})"
        )


class NotSymmetric(ValueError):
    """Matrix is not symmetric within tolerance."""


class NotPsd(ValueError):
    """Matrix has a significantly negative eigenvalue."""


class NotOrthonormal(ValueError):
    """Rows of the matrix are not orthonormal within tolerance."""


class InsufficientSamples(ValueError):
    """Too few samples for the requested computation."""


class ZeroError(ValueError):
    """Error vector has (numerically) zero norm, so the normalized loss
    is undefined for this sample."""


class SingularSolve(RuntimeError):
    """A linear solve against Sigma + sigma_eps^2 I failed; cannot happen
    for sigma_eps > 0 unless inputs are corrupt."""


class MissingMeanModel(ValueError):
    """Post-hoc / iterative training requires a mean-model checkpoint."""


class InvalidConfig(ValueError):
    """Configuration file or field is invalid."""


class BadIndex(IndexError):
    """Requested component index is out of range."""
