"""One-dimensional Gauss-Legendre quadrature rules.

All higher-dimensional integrals in this package reduce to nested
applications of these rules.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_ORDER = 20


@dataclass(frozen=True)
class QuadratureRule1D:
    """Nodes and weights of a q-point rule on [-1, 1]."""

    nodes: np.ndarray
    weights: np.ndarray
    order: int

    def mapped(self, a: float, b: float):
        """Nodes and scaled weights for the interval [a, b]."""
        half = 0.5 * (b - a)
        return a + half * (self.nodes + 1.0), half * self.weights


@lru_cache(maxsize=None)
def gauss_legendre(q: int) -> QuadratureRule1D:
    """The q-point Gauss-Legendre rule, exact for polynomials of degree 2q-1."""
    if not 1 <= q <= MAX_ORDER:
        raise ValueError(f"quadrature order must be in [1, {MAX_ORDER}], got {q}")
    nodes, weights = np.polynomial.legendre.leggauss(q)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule1D(nodes=nodes, weights=weights, order=q)


def integrate_1d(f, a: float, b: float, q: int) -> float:
    """Integrate a callable over [a, b] with the q-point rule."""
    x, w = gauss_legendre(q).mapped(a, b)
    return float(np.dot(w, f(x)))
