"""Implicit signed-function domains and boundary-condition specifications.

A domain is a scalar field negative strictly inside, positive outside, zero
on the boundary, together with a bounding box and optional analytic oracles
used by validation tests.  All field callables are vectorized over
coordinate arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StructuralError

DIRICHLET = "dirichlet"
NEUMANN = "neumann"
ROBIN = "robin"


@dataclass
class ImplicitDomain:
    value_fn: object                 # (x, y, z) arrays -> signed value array
    bounding_box: tuple              # (lo (3,), hi (3,))
    gradient_fn: object = None       # (x, y, z) -> (gx, gy, gz); finite differences if None
    oracles: dict = field(default_factory=dict)
    name: str = "implicit"

    def __post_init__(self):
        lo, hi = self.bounding_box
        self.bounding_box = (np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
        if self.gradient_fn is None:
            diam = float(np.linalg.norm(self.bounding_box[1] - self.bounding_box[0]))
            self.gradient_fn = _fd_gradient(self.value_fn, 1e-6 * diam)

    def value(self, x, y, z):
        return self.value_fn(x, y, z)

    def gradient(self, x, y, z):
        return self.gradient_fn(x, y, z)


def _fd_gradient(value_fn, step: float):
    def grad(x, y, z):
        gx = (value_fn(x + step, y, z) - value_fn(x - step, y, z)) / (2.0 * step)
        gy = (value_fn(x, y + step, z) - value_fn(x, y - step, z)) / (2.0 * step)
        gz = (value_fn(x, y, z + step) - value_fn(x, y, z - step)) / (2.0 * step)
        return gx, gy, gz
    return grad


def make_sphere(center, radius: float, box=None) -> ImplicitDomain:
    """Signed distance to a sphere; negative inside."""
    if radius <= 0:
        raise ValueError("sphere radius must be positive")
    c = np.asarray(center, dtype=float)

    def value(x, y, z):
        return np.sqrt((x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2) - radius

    def gradient(x, y, z):
        dx, dy, dz = x - c[0], y - c[1], z - c[2]
        r = np.sqrt(dx * dx + dy * dy + dz * dz)
        r = np.where(r == 0.0, 1.0, r)
        return dx / r, dy / r, dz / r

    if box is None:
        box = (c - 2.0 * radius, c + 2.0 * radius)
    oracles = {
        "volume": 4.0 / 3.0 * math.pi * radius ** 3,
        "area": 4.0 * math.pi * radius ** 2,
        "sphere": (c, radius),
    }
    return ImplicitDomain(value_fn=value, gradient_fn=gradient,
                          bounding_box=box, oracles=oracles, name="sphere")


def make_torus(center, major_radius: float, minor_radius: float,
               axis=(0.0, 0.0, 1.0), box=None) -> ImplicitDomain:
    """Signed distance to a torus with the given symmetry axis."""
    if not 0 < minor_radius < major_radius:
        raise ValueError("torus requires 0 < minor radius < major radius")
    c = np.asarray(center, dtype=float)
    w = np.asarray(axis, dtype=float)
    w = w / np.linalg.norm(w)

    def value(x, y, z):
        dx, dy, dz = x - c[0], y - c[1], z - c[2]
        axial = dx * w[0] + dy * w[1] + dz * w[2]
        rho2 = dx * dx + dy * dy + dz * dz - axial * axial
        rho = np.sqrt(np.maximum(rho2, 0.0))
        return np.sqrt((rho - major_radius) ** 2 + axial * axial) - minor_radius

    def gradient(x, y, z):
        dx, dy, dz = x - c[0], y - c[1], z - c[2]
        axial = dx * w[0] + dy * w[1] + dz * w[2]
        rho2 = dx * dx + dy * dy + dz * dz - axial * axial
        rho = np.sqrt(np.maximum(rho2, 1e-300))
        s = np.sqrt(np.maximum((rho - major_radius) ** 2 + axial * axial, 1e-300))
        drho = (rho - major_radius) / s
        daxi = axial / s
        gx = drho * (dx - axial * w[0]) / rho + daxi * w[0]
        gy = drho * (dy - axial * w[1]) / rho + daxi * w[1]
        gz = drho * (dz - axial * w[2]) / rho + daxi * w[2]
        return gx, gy, gz

    if box is None:
        pad = major_radius + 2.0 * minor_radius
        box = (c - pad, c + pad)
    oracles = {
        "volume": 2.0 * math.pi ** 2 * major_radius * minor_radius ** 2,
        "area": 4.0 * math.pi ** 2 * major_radius * minor_radius,
    }
    return ImplicitDomain(value_fn=value, gradient_fn=gradient,
                          bounding_box=box, oracles=oracles, name="torus")


def make_box(lo, hi) -> ImplicitDomain:
    """The whole embedding box; no irregular boundary (regular walls only)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)

    def value(x, y, z):
        return np.full(np.broadcast(x, y, z).shape, -1.0)

    def gradient(x, y, z):
        zero = np.zeros(np.broadcast(x, y, z).shape)
        return zero, zero.copy(), zero.copy()

    oracles = {"volume": float(np.prod(hi - lo)), "area": 0.0}
    return ImplicitDomain(value_fn=value, gradient_fn=gradient,
                          bounding_box=(lo, hi), oracles=oracles, name="box")


def complement_within_box(inner: ImplicitDomain, box) -> ImplicitDomain:
    """The box minus the inner region (sign flip of the inner field).

    The inner zero level set must be strictly inside the box; the box walls
    become the regular domain boundary.
    """
    lo = np.asarray(box[0], dtype=float)
    hi = np.asarray(box[1], dtype=float)
    _check_level_set_inside(inner, lo, hi)

    inner_value = inner.value_fn
    inner_grad = inner.gradient_fn

    def value(x, y, z):
        return -inner_value(x, y, z)

    def gradient(x, y, z):
        gx, gy, gz = inner_grad(x, y, z)
        return -gx, -gy, -gz

    oracles = {}
    if "volume" in inner.oracles:
        oracles["volume"] = float(np.prod(hi - lo)) - inner.oracles["volume"]
    if "area" in inner.oracles:
        oracles["area"] = inner.oracles["area"]
    if "sphere" in inner.oracles:
        oracles["sphere"] = inner.oracles["sphere"]
    return ImplicitDomain(value_fn=value, gradient_fn=gradient,
                          bounding_box=(lo, hi), oracles=oracles,
                          name=f"box_minus_{inner.name}")


def _check_level_set_inside(inner: ImplicitDomain, lo, hi, n: int = 24):
    t = np.linspace(0.0, 1.0, n)
    for axis in range(3):
        o1, o2 = [d for d in range(3) if d != axis]
        A, B = np.meshgrid(lo[o1] + t * (hi[o1] - lo[o1]),
                           lo[o2] + t * (hi[o2] - lo[o2]))
        for plane in (lo[axis], hi[axis]):
            coords = [None, None, None]
            coords[axis] = np.full_like(A, plane)
            coords[o1] = A
            coords[o2] = B
            vals = inner.value_fn(coords[0], coords[1], coords[2])
            if np.any(vals <= 0.0):
                raise StructuralError(
                    "inner zero level set touches the box boundary")


@dataclass
class BoundaryCondition:
    """One boundary piece: kind, data g, and Robin coefficients."""

    kind: str
    data: object = None              # g(x, y, z) vectorized; defaults to 0
    gamma1: float = 0.0
    gamma2: float = 0.0

    def __post_init__(self):
        if self.kind not in (DIRICHLET, NEUMANN, ROBIN):
            raise ConfigError(f"unknown boundary condition kind {self.kind!r}")
        if self.kind == ROBIN and self.gamma1 == 0.0 and self.gamma2 == 0.0:
            raise ConfigError("Robin condition requires gamma1, gamma2 not both zero")
        if self.data is None:
            self.data = lambda x, y, z: np.zeros(np.broadcast(x, y, z).shape)


@dataclass
class BoundaryConditionSpec:
    """Conditions per boundary piece: the rectangular walls and the
    irregular (implicit) surface."""

    wall: BoundaryCondition = None
    surface: BoundaryCondition = None

    def check_solvable(self):
        kinds = [bc.kind for bc in (self.wall, self.surface) if bc is not None]
        if not kinds:
            raise ConfigError("no boundary condition given")
        if all(k == NEUMANN for k in kinds):
            raise ConfigError("pure-Neumann problem is singular; rejected")
        if self.wall is not None and self.wall.kind == ROBIN:
            raise ConfigError("Robin conditions are supported on the irregular "
                              "surface only, not on rectangular walls")
