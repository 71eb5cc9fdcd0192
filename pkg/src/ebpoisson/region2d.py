"""Plane regions on a rectangle bounded by conic arcs.

A region is {(u,v) in rect : k_i(u,v) >= 0 for all i} where each k_i is a
quadratic (conic) in (u,v).  The boundary decomposes into straight edge
pieces and smooth arcs of the level sets k_i = 0.  Construction slices the
u-range at critical abscissae (edge crossings, tangent points, poles) so
that inside each slab the admissible v-set is a fixed list of intervals
with smoothly varying endpoints.

Two evaluation paths are provided and agree up to quadrature error:
  * an iterated product rule (:meth:`Region2D.rule`), and
  * Green's formula along the boundary loops (:func:`green_integral`),
    integrating the u-primitive of the integrand along dv.

Conic coefficients are ordered (c200, c110, c020, c100, c010, c000) for
k(u,v) = c200 u^2 + c110 uv + c020 v^2 + c100 u + c010 v + c000.

Curved constraints may appear together only when their level sets form a
parallel family (proportional non-constant parts); this is all the cut-cell
pipeline needs and keeps arc/arc intersections impossible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import StructuralError
from .quadrature import gauss_legendre

# conic "shape in v" modes
_QUAD = 0   # genuinely quadratic in v: two branches
_RAT = 1    # linear in v with u-dependent slope: rational graph
_LIN = 2    # linear in v, constant slope: polynomial graph
_VFREE = 3  # independent of v: vertical strips

_COEF_TOL = 1e-13


def conic_eval(k, u, v):
    return k[0] * u * u + k[1] * u * v + k[2] * v * v + k[3] * u + k[4] * v + k[5]


def conic_grad(k, u, v):
    return (2.0 * k[0] * u + k[1] * v + k[3], k[1] * u + 2.0 * k[2] * v + k[4])


def conic_from_height(p, sign: float, offset: float):
    """sign * (p(u,v) - offset) >= 0 for patch coefficients p = (a,b,c,d,e,g)."""
    a, b, c, d, e, g = p
    return sign * np.array([a, b, c, d, e, g - offset], dtype=float)


def solve_quadratic(a: float, b: float, c: float):
    """Real roots of a x^2 + b x + c, ascending; numerically stable."""
    scale = max(abs(a), abs(b), abs(c), 1e-300)
    if abs(a) <= 1e-14 * scale:
        if abs(b) <= 1e-14 * scale:
            return []
        return [-c / b]
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return []
    sq = math.sqrt(disc)
    if b >= 0.0:
        qq = -0.5 * (b + sq)
    else:
        qq = -0.5 * (b - sq)
    if qq == 0.0:
        r = [0.0, 0.0]
    else:
        r = [qq / a, c / qq]
    r.sort()
    return r


class ConicBranches:
    """Per-conic evaluation of the v-roots, numerically careful near tangency.

    For quadratic-in-v conics the discriminant is evaluated in factored form
    from its own u-roots, so branch pairs merge exactly at tangent abscissae
    instead of splitting by sqrt(roundoff).
    """

    __slots__ = ("k", "mode", "_dcoef", "_droots")

    def __init__(self, k):
        self.k = np.asarray(k, dtype=float)
        scale = max(1.0, float(np.max(np.abs(self.k))))
        tol = _COEF_TOL * scale
        if abs(self.k[2]) > tol:
            self.mode = _QUAD
        elif abs(self.k[1]) > tol:
            self.mode = _RAT
        elif abs(self.k[4]) > tol:
            self.mode = _LIN
        else:
            self.mode = _VFREE
        if self.mode == _QUAD:
            k0, k1, k2, k3, k4, k5 = self.k
            self._dcoef = (k1 * k1 - 4.0 * k2 * k0,
                           2.0 * k1 * k4 - 4.0 * k2 * k3,
                           k4 * k4 - 4.0 * k2 * k5)
            self._droots = solve_quadratic(*self._dcoef)
        else:
            self._dcoef = None
            self._droots = []

    def disc(self, u):
        a, b, c = self._dcoef
        r = self._droots
        if len(r) == 2:
            return a * (u - r[0]) * (u - r[1])
        if len(r) == 1:
            # solve_quadratic returns a single root only when |a| is negligible
            return b * (u - r[0])
        return (a * u + b) * u + c

    def _B(self, u):
        return self.k[1] * u + self.k[4]

    def _C(self, u):
        return (self.k[0] * u + self.k[3]) * u + self.k[5]

    def root(self, branch: int, u):
        """Branch of {v : k(u, v) = 0}; for _QUAD, branch 0/1 = lower/upper."""
        B, C = self._B(u), self._C(u)
        if self.mode == _QUAD:
            A = self.k[2]
            disc = np.maximum(self.disc(u), 0.0)
            sq = np.sqrt(disc)
            lo = (-B - sq) / (2.0 * A)
            hi = (-B + sq) / (2.0 * A)
            low, high = np.minimum(lo, hi), np.maximum(lo, hi)
            return low if branch == 0 else high
        return -C / B


# ---------------------------------------------------------------------------
# boundary segments


class Line:
    """Straight segment from p0 to p1, affine parameter."""

    __slots__ = ("p0", "p1", "_cache")

    def __init__(self, p0, p1):
        self.p0 = (float(p0[0]), float(p0[1]))
        self.p1 = (float(p1[0]), float(p1[1]))
        self._cache = {}

    @property
    def start(self):
        return self.p0

    @property
    def end(self):
        return self.p1

    def reversed(self):
        return Line(self.p1, self.p0)

    def samples(self, q: int):
        got = self._cache.get(q)
        if got is not None:
            return got
        rule = gauss_legendre(q)
        t = 0.5 * (rule.nodes + 1.0)
        w = 0.5 * rule.weights
        u = self.p0[0] + (self.p1[0] - self.p0[0]) * t
        v = self.p0[1] + (self.p1[1] - self.p0[1]) * t
        wdv = w * (self.p1[1] - self.p0[1])
        out = (u, v, wdv)
        self._cache[q] = out
        return out


class GraphArc:
    """Arc v = branch(u) of a conic, u running from ua to ub.

    With ``smooth`` the u-parameterization uses the cubic smoothstep, which
    absorbs the sqrt behaviour of a branch near tangency at either end.
    """

    __slots__ = ("cb", "branch", "ua", "ub", "smooth", "_p0", "_p1", "_cache")

    def __init__(self, cb: ConicBranches, branch, ua, ub, smooth, p0=None, p1=None):
        self.cb = cb
        self.branch = branch
        self.ua = float(ua)
        self.ub = float(ub)
        self.smooth = bool(smooth)
        self._p0 = p0 if p0 is not None else (self.ua, float(cb.root(branch, self.ua)))
        self._p1 = p1 if p1 is not None else (self.ub, float(cb.root(branch, self.ub)))
        self._cache = {}

    @property
    def start(self):
        return self._p0

    @property
    def end(self):
        return self._p1

    def reversed(self):
        return GraphArc(self.cb, self.branch, self.ub, self.ua,
                        self.smooth, p0=self._p1, p1=self._p0)

    def samples(self, q: int):
        got = self._cache.get(q)
        if got is not None:
            return got
        rule = gauss_legendre(q)
        t = 0.5 * (rule.nodes + 1.0)
        w = 0.5 * rule.weights
        du = self.ub - self.ua
        if self.smooth:
            s = t * t * (3.0 - 2.0 * t)
            u = self.ua + du * s
            dudt = du * 6.0 * t * (1.0 - t)
        else:
            u = self.ua + du * t
            dudt = np.full_like(t, du)
        v = self.cb.root(self.branch, u)
        ku, kv = conic_grad(self.cb.k, u, v)
        with np.errstate(divide="ignore", invalid="ignore"):
            dvdu = np.where(np.abs(kv) > 0.0, -ku / np.where(kv == 0.0, 1.0, kv), 0.0)
        wdv = w * dvdu * dudt
        out = (u, v, wdv)
        self._cache[q] = out
        return out


# ---------------------------------------------------------------------------
# region construction


@dataclass
class _Slab:
    a: float
    b: float
    # intervals: list of (lo_src, hi_src); src = ('const', value) or ('root', ci, branch)
    intervals: list
    smooth: bool


@dataclass
class Region2D:
    rect: tuple                      # (u0, u1, v0, v1)
    branches: list = field(default_factory=list)   # ConicBranches per constraint
    slabs: list = field(default_factory=list)
    loops: list = field(default_factory=list)
    _rules: dict = field(default_factory=dict, repr=False)

    def is_empty(self) -> bool:
        return not self.slabs

    def _eval_src(self, src, u):
        if src[0] == "const":
            return src[1] if np.isscalar(u) else np.full_like(u, src[1])
        _, ci, branch = src
        v0, v1 = self.rect[2], self.rect[3]
        return np.clip(self.branches[ci].root(branch, u), v0, v1)

    def rule(self, q: int):
        """Iterated product rule: points (N,2) and positive weights (N,)."""
        got = self._rules.get(q)
        if got is not None:
            return got
        gl = gauss_legendre(q)
        pts, wts = [], []
        for slab in self.slabs:
            du = slab.b - slab.a
            t = 0.5 * (gl.nodes + 1.0)
            wt = 0.5 * gl.weights
            if slab.smooth:
                s = t * t * (3.0 - 2.0 * t)
                u = slab.a + du * s
                wu = wt * du * 6.0 * t * (1.0 - t)
            else:
                u = slab.a + du * t
                wu = wt * du
            for lo_src, hi_src in slab.intervals:
                lo = self._eval_src(lo_src, u)
                hi = self._eval_src(hi_src, u)
                width = np.maximum(hi - lo, 0.0)
                vn = lo[:, None] + 0.5 * (gl.nodes[None, :] + 1.0) * width[:, None]
                wv = 0.5 * gl.weights[None, :] * width[:, None] * wu[:, None]
                un = np.broadcast_to(u[:, None], vn.shape)
                pts.append(np.column_stack([un.ravel(), vn.ravel()]))
                wts.append(wv.ravel())
        if pts:
            out = (np.vstack(pts), np.concatenate(wts))
        else:
            out = (np.zeros((0, 2)), np.zeros(0))
        self._rules[q] = out
        return out

    def integrate(self, G, q: int = 6) -> float:
        pts, wts = self.rule(q)
        if len(wts) == 0:
            return 0.0
        return float(np.dot(wts, G(pts[:, 0], pts[:, 1])))

    def area(self, q: int = 6) -> float:
        _, wts = self.rule(q)
        return float(wts.sum())


def _check_parallel_family(branches):
    curved = [cb for cb in branches if cb.mode != _VFREE]
    for ii in range(len(curved)):
        for jj in range(ii + 1, len(curved)):
            a = curved[ii].k[:5]
            b = curved[jj].k[:5]
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na == 0.0 or nb == 0.0:
                continue
            cross = np.abs(np.outer(a, b) - np.outer(b, a)).max()
            if cross > 1e-10 * na * nb:
                raise NotImplementedError(
                    "independent curved constraints on one rectangle are not supported")


def _admissible_intervals(cb: ConicBranches, u, v0, v1, tol):
    """v-intervals of {k(u, .) >= 0} intersected with [v0, v1], with sources.

    Sources use conic index -1; caller rewrites to the actual index.
    """
    k = cb.k
    B = k[1] * u + k[4]
    C = (k[0] * u + k[3]) * u + k[5]
    full = [(("const", v0), ("const", v1))]
    if cb.mode == _QUAD:
        A = k[2]
        disc = cb.disc(u)
        if disc <= 0.0:
            return full if A > 0.0 else []
        sq = math.sqrt(disc)
        lo = (-B - sq) / (2.0 * A)
        hi = (-B + sq) / (2.0 * A)
        if lo > hi:
            lo, hi = hi, lo
        if A > 0.0:  # admissible outside the roots
            out = []
            if lo > v0 + tol:
                out.append((("const", v0), ("root", -1, 0)))
            if hi < v1 - tol:
                out.append((("root", -1, 1), ("const", v1)))
            return out
        # A < 0: admissible between the roots
        if min(hi, v1) - max(lo, v0) <= tol:
            return []
        lo_src = ("root", -1, 0) if lo > v0 + tol else ("const", v0)
        hi_src = ("root", -1, 1) if hi < v1 - tol else ("const", v1)
        return [(lo_src, hi_src)]
    if cb.mode in (_RAT, _LIN):
        if B == 0.0:
            return full if C >= 0.0 else []
        r = -C / B
        if B > 0.0:  # v >= r
            if r <= v0 + tol:
                return full
            if r >= v1 - tol:
                return []
            return [(("root", -1, 0), ("const", v1))]
        if r >= v1 - tol:
            return full
        if r <= v0 + tol:
            return []
        return [(("const", v0), ("root", -1, 0))]
    # _VFREE
    return full if C >= 0.0 else []


def _intersect_two(ivals_a, ivals_b, vals):
    """Intersect two tagged interval lists; vals maps src -> float at u_mid."""
    out = []
    for lo_a, hi_a in ivals_a:
        for lo_b, hi_b in ivals_b:
            lo = lo_a if vals[lo_a] >= vals[lo_b] else lo_b
            hi = hi_a if vals[hi_a] <= vals[hi_b] else hi_b
            if vals[hi] > vals[lo]:
                out.append((lo, hi))
    out.sort(key=lambda iv: vals[iv[0]])
    return out


def build_region(rect, conics, merge_tol: float = 1e-11) -> Region2D:
    """Region {k >= 0 for all conics} on the rectangle, as slabs + loops."""
    u0, u1, v0, v1 = (float(x) for x in rect)
    branches = [ConicBranches(k) for k in conics]
    _check_parallel_family(branches)
    tol_u = merge_tol * max(u1 - u0, 1e-30)
    tol_v = merge_tol * max(v1 - v0, 1e-30)

    crit = [u0, u1]
    for cb in branches:
        k = cb.k
        for v_edge in (v0, v1):
            crit.extend(solve_quadratic(
                k[0], k[1] * v_edge + k[3],
                k[2] * v_edge * v_edge + k[4] * v_edge + k[5]))
        if cb.mode == _QUAD:
            crit.extend(cb._droots)
        elif cb.mode == _RAT:
            crit.append(-k[4] / k[1])
        elif cb.mode == _VFREE:
            crit.extend(solve_quadratic(k[0], k[3], k[5]))
    crit = sorted(c for c in crit if u0 - tol_u <= c <= u1 + tol_u)
    merged = []
    for c in crit:
        if not merged or c - merged[-1] > tol_u:
            merged.append(min(max(c, u0), u1))
    if merged[-1] < u1 - tol_u:
        merged.append(u1)

    region = Region2D(rect=(u0, u1, v0, v1), branches=branches)

    for a, b in zip(merged[:-1], merged[1:]):
        if b - a <= tol_u:
            continue
        um = 0.5 * (a + b)
        ivals = None
        for ci, cb in enumerate(branches):
            tagged = _admissible_intervals(cb, um, v0, v1, tol_v)
            tagged = [(
                lo if lo[0] == "const" else ("root", ci, lo[2]),
                hi if hi[0] == "const" else ("root", ci, hi[2]),
            ) for lo, hi in tagged]
            if ivals is None:
                ivals = tagged
            else:
                vals = {}
                for pair in ivals + tagged:
                    for src in pair:
                        if src not in vals:
                            vals[src] = (src[1] if src[0] == "const" else
                                         min(max(float(branches[src[1]].root(src[2], um)),
                                                 v0), v1))
                ivals = _intersect_two(ivals, tagged, vals)
            if not ivals:
                break
        if ivals is None:  # no constraints: full rectangle
            ivals = [(("const", v0), ("const", v1))]
        if not ivals:
            continue
        smooth = any(src[0] == "root" and branches[src[1]].mode == _QUAD
                     for pair in ivals for src in pair)
        region.slabs.append(_Slab(a=a, b=b, intervals=ivals, smooth=smooth))

    _build_loops(region, tol_v)
    return region


def _build_loops(region: Region2D, tol_v: float):
    for slab in region.slabs:
        a, b = slab.a, slab.b
        for lo_src, hi_src in slab.intervals:
            vla = float(region._eval_src(lo_src, a))
            vlb = float(region._eval_src(lo_src, b))
            vha = float(region._eval_src(hi_src, a))
            vhb = float(region._eval_src(hi_src, b))
            segs = []

            def graph(src, ua, ub, pa, pb):
                if src[0] == "const":
                    return Line(pa, pb)
                _, ci, branch = src
                return GraphArc(region.branches[ci], branch, ua, ub,
                                slab.smooth, p0=pa, p1=pb)

            segs.append(graph(lo_src, a, b, (a, vla), (b, vlb)))       # bottom, left->right
            if vhb - vlb > tol_v:
                segs.append(Line((b, vlb), (b, vhb)))                  # right wall, up
            segs.append(graph(hi_src, b, a, (b, vhb), (a, vha)))       # top, right->left
            if vha - vla > tol_v:
                segs.append(Line((a, vha), (a, vla)))                  # left wall, down
            region.loops.append(segs)


def validate_loops(loops, tol: float = 1e-9):
    """Every loop must chain head-to-tail and close."""
    for loop in loops:
        if not loop:
            raise StructuralError("empty boundary loop")
        for s0, s1 in zip(loop, loop[1:] + loop[:1]):
            gap = math.hypot(s0.end[0] - s1.start[0], s0.end[1] - s1.start[1])
            if gap > tol:
                raise StructuralError(f"boundary loop not closed (gap {gap:.3e})")


def green_integral(loops, G, q: int = 6, xi0: float | None = None) -> float:
    """Integral of G over the region bounded by CCW loops via Green's formula.

    Evaluates the contour integral of H dv, H(u,v) being the u-primitive of
    G from xi0; the inner primitive uses the same q-point rule.
    """
    validate_loops(loops)
    if xi0 is None:
        xi0 = min(min(seg.start[0], seg.end[0]) for loop in loops for seg in loop)
    gl = gauss_legendre(q)
    total = 0.0
    for loop in loops:
        for seg in loop:
            u, v, wdv = seg.samples(q)
            if not np.any(wdv):
                continue
            half = 0.5 * (u - xi0)
            xs = xi0 + half[:, None] * (gl.nodes[None, :] + 1.0)
            ws = half[:, None] * gl.weights[None, :]
            H = np.sum(ws * G(xs, np.broadcast_to(v[:, None], xs.shape)), axis=1)
            total += float(np.dot(wdv, H))
    return total
