"""Cubature over quadratic-graph surface patches and cut-cell volumes.

Scalar fields passed to these routines must be vectorized: they take
coordinate arrays of a common shape and return an array of that shape.

Volume integrals use the divergence theorem with the flux
F = (primitive of f in x, 0, 0), so only x-faces and surface patches
contribute; surface integrals over a patch reduce via Green's formula to
contour integrals of the u-primitive of the metric-weighted integrand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StructuralError
from .quadrature import gauss_legendre
from .region2d import Region2D, green_integral

__all__ = [
    "HeightPatch", "FacePiece", "CellRegion", "PatchRule",
    "surface_integral", "volume_integral", "box_region", "column_volume_rule",
]


@dataclass
class PatchRule:
    """Discrete surface measure: points, dS-weights, unit outward normals."""

    points: np.ndarray    # (N, 3) global
    weights: np.ndarray   # (N,) include the metric factor
    normals: np.ndarray   # (N, 3) unit, outward
    flat_weights: np.ndarray  # (N,) du dv weights without the metric (scaled to global)


@dataclass
class HeightPatch:
    """Graph w = p(u,v) over a conic-bounded region, in a scaled local frame.

    ``perm`` lists the global axis of local u, v, w; the local frame has its
    origin at ``origin`` and unit length ``scale`` (the grid spacing), so the
    quadratic coefficients are O(1).  ``orient`` = +1 when the outward normal
    of the domain has a positive local-w component (domain below the graph).
    """

    perm: tuple
    origin: np.ndarray
    scale: float
    coeffs: tuple                # (a, b, c, d, e, g): w = a u^2 + b uv + c v^2 + d u + e v + g
    region: Region2D
    orient: int = 1
    fit_residual: float = 0.0
    planar_fallback: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        inv = [0, 0, 0]
        for local_axis, global_axis in enumerate(self.perm):
            inv[global_axis] = local_axis
        self._inv_perm = tuple(inv)
        self._rules = {}

    @property
    def loops(self):
        return self.region.loops

    def p(self, u, v):
        a, b, c, d, e, g = self.coeffs
        return a * u * u + b * u * v + c * v * v + d * u + e * v + g

    def grad_p(self, u, v):
        a, b, c, d, e, g = self.coeffs
        return 2.0 * a * u + b * v + d, b * u + 2.0 * c * v + e

    def to_xyz(self, u, v, w):
        """Map scaled-local coordinates to global points, shape (N, 3)."""
        out = np.empty((np.size(u), 3))
        local = (np.ravel(u), np.ravel(v), np.ravel(w))
        for d in range(3):
            out[:, d] = self.origin[d] + self.scale * local[self._inv_perm[d]]
        return out

    def local_of(self, xyz):
        """Inverse of :meth:`to_xyz` for (N, 3) points."""
        rel = (np.asarray(xyz) - self.origin) / self.scale
        return rel[:, self.perm[0]], rel[:, self.perm[1]], rel[:, self.perm[2]]

    def rule(self, q: int = 6) -> PatchRule:
        got = self._rules.get(q)
        if got is not None:
            return got
        pts2, w2 = self.region.rule(q)
        u, v = pts2[:, 0], pts2[:, 1]
        pu, pv = self.grad_p(u, v)
        metric = np.sqrt(1.0 + pu * pu + pv * pv)
        pts = self.to_xyz(u, v, self.p(u, v))
        normals = np.empty_like(pts)
        n_local = (-pu, -pv, np.ones_like(pu))
        for d in range(3):
            normals[:, d] = self.orient * n_local[self._inv_perm[d]] / metric
        out = PatchRule(
            points=pts,
            weights=w2 * metric * self.scale ** 2,
            normals=normals,
            flat_weights=w2 * self.scale ** 2,
        )
        self._rules[q] = out
        return out

    def area(self, q: int = 6) -> float:
        return float(self.rule(q).weights.sum())

    def average(self, g, q: int = 6) -> float:
        r = self.rule(q)
        return float(np.dot(r.weights, g(r.points[:, 0], r.points[:, 1], r.points[:, 2]))
                     / r.weights.sum())

    def flux_x(self, f1, q: int = 6) -> float:
        """Flux of the field (f1, 0, 0) through the patch, outward."""
        r = self.rule(q)
        nx = r.normals[:, 0] * r.weights  # unit normal times dS == unnormalized * dudv
        vals = f1(r.points[:, 0], r.points[:, 1], r.points[:, 2])
        return float(np.dot(nx, vals))


def surface_integral(patch: HeightPatch, g, q: int = 6) -> float:
    """Integral of g over the patch via Green's formula on the (u,v) loops."""
    scale2 = patch.scale ** 2

    def integrand(u, v):
        w = patch.p(u, v)
        pu, pv = patch.grad_p(u, v)
        pts = patch.to_xyz(u, v, w)
        vals = g(pts[:, 0], pts[:, 1], pts[:, 2]).reshape(np.shape(u))
        return vals * np.sqrt(1.0 + pu * pu + pv * pv) * scale2

    if not patch.loops:
        return 0.0
    return green_integral(patch.loops, integrand, q=q)


@dataclass
class FacePiece:
    """Portion of an axis-aligned cell face, as a region in face coordinates.

    Face-local (s, t) are the two global axes other than ``axis`` in
    ascending order, scaled by ``scale`` from ``origin``.
    """

    axis: int
    side: int                    # 0 = low face, 1 = high face
    plane: float                 # global coordinate along `axis`
    origin: np.ndarray           # (2,) global coords of local (0,0) along (s,t) axes
    scale: float
    region: Region2D

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.taxes = tuple(d for d in range(3) if d != self.axis)

    def rule(self, q: int = 6):
        pts2, w2 = self.region.rule(q)
        pts = np.empty((len(w2), 3))
        pts[:, self.axis] = self.plane
        pts[:, self.taxes[0]] = self.origin[0] + self.scale * pts2[:, 0]
        pts[:, self.taxes[1]] = self.origin[1] + self.scale * pts2[:, 1]
        return pts, w2 * self.scale ** 2

    def area(self, q: int = 6) -> float:
        _, w = self.rule(q)
        return float(w.sum())

    def normal_sign(self) -> float:
        return 1.0 if self.side == 1 else -1.0


@dataclass
class CellRegion:
    """A volume bounded by axis-aligned face pieces and height patches."""

    box_lo: np.ndarray
    box_hi: np.ndarray
    faces: list
    patches: list

    def __post_init__(self):
        self.box_lo = np.asarray(self.box_lo, dtype=float)
        self.box_hi = np.asarray(self.box_hi, dtype=float)

    def check_closed(self, q: int = 6, tol: float = 1e-8):
        """The vector area of a closed surface vanishes."""
        total = np.zeros(3)
        area = 0.0
        for fp in self.faces:
            a = fp.area(q)
            total[fp.axis] += fp.normal_sign() * a
            area += a
        for patch in self.patches:
            r = patch.rule(q)
            total += r.normals.T @ r.weights
            area += float(r.weights.sum())
        if area > 0.0 and np.abs(total).max() > tol * area:
            raise StructuralError(
                f"boundary not closed: vector area {total} vs total area {area:.3e}")


def _primitive_x(f, pts, xi0: float, q: int):
    """F1(x,y,z) = integral of f(.,y,z) from xi0 to x, at many points."""
    gl = gauss_legendre(q)
    x = pts[:, 0]
    half = 0.5 * (x - xi0)
    xs = xi0 + half[:, None] * (gl.nodes[None, :] + 1.0)
    ys = np.broadcast_to(pts[:, 1][:, None], xs.shape)
    zs = np.broadcast_to(pts[:, 2][:, None], xs.shape)
    vals = f(xs, ys, zs)
    return np.sum(half[:, None] * gl.weights[None, :] * vals, axis=1)


def volume_integral(region: CellRegion, f, q: int = 6) -> float:
    """Integral of f over the region via the divergence theorem."""
    region.check_closed(q)
    xi0 = float(region.box_lo[0])
    total = 0.0
    for fp in region.faces:
        if fp.axis != 0:
            continue
        pts, w = fp.rule(q)
        F1 = _primitive_x(f, pts, xi0, q)
        total += fp.normal_sign() * float(np.dot(w, F1))
    for patch in region.patches:
        r = patch.rule(q)
        F1 = _primitive_x(f, r.points, xi0, q)
        total += float(np.dot(r.normals[:, 0] * r.weights, F1))
    return total


def box_region(lo, hi) -> CellRegion:
    """The full box as a CellRegion (six rectangular faces, no patches)."""
    from .region2d import build_region

    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    scale = float(np.max(hi - lo))
    faces = []
    for axis in range(3):
        t0, t1 = [d for d in range(3) if d != axis]
        ext = (hi - lo) / scale
        region = build_region((0.0, ext[t0], 0.0, ext[t1]), [])
        for side, plane in ((0, lo[axis]), (1, hi[axis])):
            faces.append(FacePiece(axis=axis, side=side, plane=plane,
                                   origin=np.array([lo[t0], lo[t1]]),
                                   scale=scale, region=region))
    return CellRegion(box_lo=lo, box_hi=hi, faces=faces, patches=[])


def column_volume_rule(region2d: Region2D, w_lo, w_hi, q: int = 6,
                       q_w: int = None):
    """3D product rule over {(u,v,w): (u,v) in region, w_lo <= w <= w_hi}.

    Bounds may be constants or vectorized callables of (u, v); local units.
    The column direction is smooth in w, so its order q_w may be lower than
    the in-plane order.  Returns (points (N,3), weights (N,)).
    """
    if q_w is None:
        q_w = q
    pts2, w2 = region2d.rule(q)
    if len(w2) == 0:
        return np.zeros((0, 3)), np.zeros(0)
    u, v = pts2[:, 0], pts2[:, 1]
    lo = w_lo(u, v) if callable(w_lo) else np.full_like(u, float(w_lo))
    hi = w_hi(u, v) if callable(w_hi) else np.full_like(u, float(w_hi))
    width = np.maximum(hi - lo, 0.0)
    gl = gauss_legendre(q_w)
    wn = lo[:, None] + 0.5 * (gl.nodes[None, :] + 1.0) * width[:, None]
    ww = 0.5 * gl.weights[None, :] * width[:, None] * w2[:, None]
    pts = np.empty((len(u) * q_w, 3))
    pts[:, 0] = np.repeat(u, q_w)
    pts[:, 1] = np.repeat(v, q_w)
    pts[:, 2] = wn.ravel()
    return pts, ww.ravel()
