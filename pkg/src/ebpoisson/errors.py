"""Exception types shared across the solver."""


class EbPoissonError(Exception):
    """Base class for all solver errors."""


class StructuralError(EbPoissonError):
    """Geometry or operator structure is inconsistent (open boundary loop,
    unassigned cell, invalid separator split, ...)."""


class NoLatticeFound(EbPoissonError):
    """Back-tracking stencil search exhausted every candidate."""


class ZeroPivotError(EbPoissonError):
    """LU factorization without pivoting hit a zero diagonal entry."""

    def __init__(self, step: int, value: float = 0.0):
        self.step = step
        self.value = value
        super().__init__(f"zero pivot at elimination step {step} (|value|={abs(value):.3e})")


class DivergenceError(EbPoissonError):
    """Iterative solver residual grew over several consecutive cycles."""


class ConfigError(EbPoissonError):
    """Experiment configuration file is invalid."""
