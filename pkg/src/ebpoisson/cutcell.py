"""Cut-cell geometry: embedding an implicit domain into a Cartesian grid.

Cells are classified by corner signs with sub-sampling in a safety band,
cut cells get a per-cell quadratic boundary patch fitted to root samples of
the implicit function, and all volumes, apertures, centroids and moments
come from conic-region cubature in scaled cell-local coordinates.

Multi-component cells (detected by labeling the 4x4x4 sub-voxel signs) and
cells whose boundary cannot be written as a height function are rebuilt
from h/4 sub-voxels, each carrying its own mini patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .cubature import FacePiece, HeightPatch, column_volume_rule
from .domain import ImplicitDomain
from .region2d import Region2D, build_region, conic_from_height

INTERIOR, EXTERIOR, CUT = 1, 0, 2

_ZERO_TOL = 1e-12          # sign tolerance relative to h
_BAND = 0.9                # safety band in units of h*sqrt(3)/2, slightly padded


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid covering the embedding box."""

    origin: tuple
    h: float
    extents: tuple

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("grid spacing must be positive")
        if min(self.extents) < 4:
            raise ValueError("need at least 4 cells per axis for the stencil")
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))
        object.__setattr__(self, "extents", tuple(int(n) for n in self.extents))

    @classmethod
    def for_domain(cls, domain: ImplicitDomain, h: float) -> "GridSpec":
        lo, hi = domain.bounding_box
        extents = tuple(int(round((hi[d] - lo[d]) / h)) for d in range(3))
        return cls(origin=tuple(lo), h=h, extents=extents)

    def cell_lo(self, idx):
        return np.array([self.origin[d] + idx[d] * self.h for d in range(3)])

    def cell_center(self, idx):
        return np.array([self.origin[d] + (idx[d] + 0.5) * self.h for d in range(3)])

    def in_bounds(self, idx) -> bool:
        return all(0 <= idx[d] < self.extents[d] for d in range(3))

    @property
    def n_cells(self) -> int:
        return self.extents[0] * self.extents[1] * self.extents[2]


@dataclass
class PatchFit:
    perm: tuple          # global axes of local (u, v, w)
    coeffs: tuple        # scaled-local quadratic, w = p(u, v)
    inside_below: bool   # domain on the w < p side
    residual: float = 0.0
    planar: bool = False
    ok: bool = True
    n_points: int = 0
    fold: bool = False


@dataclass
class ComponentGeometry:
    """One connected component of a cut cell (or a full interior cell)."""

    cell: tuple
    comp: int
    volume: float
    centroid: np.ndarray
    vol_pts: np.ndarray          # (N,3) global cubature points of the component
    vol_wts: np.ndarray
    patches: list = field(default_factory=list)
    surf_pts: np.ndarray = None  # concatenated patch rules (global)
    surf_wts: np.ndarray = None
    surf_normals: np.ndarray = None
    face_area: np.ndarray = None  # (3,2): area on each cell face
    flagged: bool = False

    @property
    def patch_area(self) -> float:
        return 0.0 if self.surf_wts is None else float(self.surf_wts.sum())

    def surface_average(self, g) -> float:
        if self.surf_wts is None or len(self.surf_wts) == 0:
            return 0.0
        vals = g(self.surf_pts[:, 0], self.surf_pts[:, 1], self.surf_pts[:, 2])
        return float(np.dot(self.surf_wts, vals) / self.surf_wts.sum())

    def volume_average(self, f) -> float:
        vals = f(self.vol_pts[:, 0], self.vol_pts[:, 1], self.vol_pts[:, 2])
        return float(np.dot(self.vol_wts, vals) / self.volume)


@dataclass
class CellGeometry:
    classification: int
    components: list
    volume: float
    apertures: np.ndarray        # (3, 2)
    labels: np.ndarray = None    # (4,4,4) sub-voxel component labels (cut cells)
    fit: PatchFit = None
    face_info: dict = None       # (axis, side) -> "full" | "empty" | conic coeffs

    @property
    def is_cut(self) -> bool:
        return self.classification == CUT

    @property
    def boundary_patch(self):
        for comp in self.components:
            if comp.patches:
                return comp.patches[0]
        return None

    def face_region(self, axis: int, side: int):
        """Aperture region on a face, in ascending-axes face coordinates
        scaled by h; "full"/"empty" for trivial faces, None if unavailable."""
        key = (axis, side)
        if self.face_info and key in self.face_info:
            info = self.face_info[key]
            if isinstance(info, str):
                return info
            return build_region((0.0, 1.0, 0.0, 1.0), [info])
        if self.fit is not None:
            _, k = _face_conic(self.fit, self.fit.perm.index(axis), side)
            return build_region((0.0, 1.0, 0.0, 1.0), [k])
        return None


class GridGeometry:
    """Map cell index -> CellGeometry, stored sparsely (cut cells only)."""

    def __init__(self, domain: ImplicitDomain, grid: GridSpec):
        self.domain = domain
        self.grid = grid
        self.classification = np.zeros(grid.extents, dtype=np.int8)
        self.cut_cells: dict = {}

    def __getitem__(self, idx) -> CellGeometry:
        idx = tuple(idx)
        cls = self.classification[idx]
        if cls == CUT:
            return self.cut_cells[idx]
        return self._trivial(idx, cls)

    def _trivial(self, idx, cls) -> CellGeometry:
        h = self.grid.h
        if cls == EXTERIOR:
            return CellGeometry(classification=EXTERIOR, components=[],
                                volume=0.0, apertures=np.zeros((3, 2)))
        comp = interior_component(self.grid, idx)
        return CellGeometry(classification=INTERIOR, components=[comp],
                            volume=h ** 3, apertures=np.full((3, 2), h * h))

    def cut_indices(self):
        return sorted(self.cut_cells.keys())

    def interior_indices(self):
        return [tuple(int(v) for v in idx)
                for idx in np.argwhere(self.classification == INTERIOR)]

    def non_exterior_indices(self):
        return [tuple(int(v) for v in idx)
                for idx in np.argwhere(self.classification != EXTERIOR)]

    def is_interior(self, idx) -> bool:
        return self.grid.in_bounds(idx) and self.classification[tuple(idx)] == INTERIOR

    def classify(self, idx) -> int:
        if not self.grid.in_bounds(idx):
            return EXTERIOR
        return int(self.classification[tuple(idx)])

    def components_of(self, idx):
        return self[idx].components

    def total_volume(self) -> float:
        h3 = self.grid.h ** 3
        n_int = int(np.count_nonzero(self.classification == INTERIOR))
        return n_int * h3 + sum(g.volume for g in self.cut_cells.values())


def interior_component(grid: GridSpec, idx) -> ComponentGeometry:
    """Full-cell component; moments are closed-form so no cubature points."""
    h = grid.h
    center = grid.cell_center(idx)
    area = np.full((3, 2), h * h)
    return ComponentGeometry(cell=tuple(idx), comp=0, volume=h ** 3,
                             centroid=center,
                             vol_pts=np.zeros((0, 3)), vol_wts=np.zeros(0),
                             face_area=area)


# ---------------------------------------------------------------------------
# classification


def _corner_lattice(domain, grid):
    nx, ny, nz = grid.extents
    xs = grid.origin[0] + grid.h * np.arange(nx + 1)
    ys = grid.origin[1] + grid.h * np.arange(ny + 1)
    zs = grid.origin[2] + grid.h * np.arange(nz + 1)
    X, Y, Z = np.meshgrid(xs, ys, zs, indexing="ij")
    return domain.value(X, Y, Z)

def _cell_minmax(V):
    c = [V[:-1, :-1, :-1], V[1:, :-1, :-1], V[:-1, 1:, :-1], V[:-1, :-1, 1:],
         V[1:, 1:, :-1], V[1:, :-1, 1:], V[:-1, 1:, 1:], V[1:, 1:, 1:]]
    vmin = np.minimum.reduce(c)
    vmax = np.maximum.reduce(c)
    return vmin, vmax


def _fine_samples(domain, grid, cells):
    """(K,5,5,5) lattice values at h/4 steps for the given cells."""
    h = grid.h
    off = h * np.arange(5) / 4.0
    lo = np.asarray([grid.cell_lo(c) for c in cells])  # (K,3)
    x = lo[:, 0][:, None, None, None] + off[None, :, None, None]
    y = lo[:, 1][:, None, None, None] + off[None, None, :, None]
    z = lo[:, 2][:, None, None, None] + off[None, None, None, :]
    x, y, z = np.broadcast_arrays(x, y, z)
    return domain.value(x, y, z)


def _center_signs(domain, grid, cells):
    """(K,4,4,4) signs at sub-voxel centers."""
    h = grid.h
    off = h * (np.arange(4) + 0.5) / 4.0
    lo = np.asarray([grid.cell_lo(c) for c in cells])
    x = lo[:, 0][:, None, None, None] + off[None, :, None, None]
    y = lo[:, 1][:, None, None, None] + off[None, None, :, None]
    z = lo[:, 2][:, None, None, None] + off[None, None, None, :]
    x, y, z = np.broadcast_arrays(x, y, z)
    return domain.value(x, y, z) < 0.0


def classify_cells(domain: ImplicitDomain, grid: GridSpec):
    """Classification array plus fine-sample data for boundary-band cells."""
    V = _corner_lattice(domain, grid)
    vmin, vmax = _cell_minmax(V)
    tolz = _ZERO_TOL * grid.h
    band_halfwidth = _BAND * grid.h * np.sqrt(3.0)

    cls = np.full(grid.extents, EXTERIOR, dtype=np.int8)
    cls[vmax < -tolz] = INTERIOR
    sure = (vmin > band_halfwidth) | (vmax < -band_halfwidth)
    band_cells = [tuple(int(v) for v in idx) for idx in np.argwhere(~sure)]

    fine = {}
    if band_cells:
        F = _fine_samples(domain, grid, band_cells)
        fmin = F.min(axis=(1, 2, 3))
        fmax = F.max(axis=(1, 2, 3))
        for n, idx in enumerate(band_cells):
            if fmin[n] < -tolz and fmax[n] > tolz:
                cls[idx] = CUT
                fine[idx] = F[n]
            elif fmax[n] <= tolz:
                cls[idx] = INTERIOR
            else:
                cls[idx] = EXTERIOR
    return cls, fine


# ---------------------------------------------------------------------------
# patch fitting

_STATION_GRIDS = {5: (np.arange(5) + 0.5) / 5.0, 9: (np.arange(9) + 0.5) / 9.0}
_RAY_LEVELS = np.linspace(-0.02, 1.02, 14)
_W_TOL = 0.02


def _axis_roots(domain, lo, h, axis, stations):
    """All boundary roots along grid lines parallel to one axis.

    Returns local points (N, 3) in cell-scaled global-axis order, plus the
    number of rays crossing the boundary more than once (fold evidence for
    the height axis).
    """
    o1, o2 = [d for d in range(3) if d != axis]
    g = np.asarray(np.meshgrid(stations, stations, indexing="ij"))
    s1 = g[0].ravel()
    s2 = g[1].ravel()
    nray = len(s1)
    levels = _RAY_LEVELS
    coords = np.empty((3, nray, len(levels)))
    coords[o1] = lo[o1] + h * s1[:, None]
    coords[o2] = lo[o2] + h * s2[:, None]
    coords[axis] = lo[axis] + h * levels[None, :]
    vals = domain.value(coords[0], coords[1], coords[2])

    signs = vals < 0.0
    flips = signs[:, 1:] != signs[:, :-1]
    multi = int((flips.sum(axis=1) > 1).sum())
    ray_i, lev_i = np.nonzero(flips)
    if len(ray_i) == 0:
        return np.zeros((0, 3)), multi
    wa = levels[lev_i]
    wb = levels[lev_i + 1]
    fa = vals[ray_i, lev_i]
    c1 = lo[o1] + h * s1[ray_i]
    c2 = lo[o2] + h * s2[ray_i]
    coords_m = np.empty((3, len(ray_i)))
    coords_m[o1] = c1
    coords_m[o2] = c2
    for _ in range(46):
        wm = 0.5 * (wa + wb)
        coords_m[axis] = lo[axis] + h * wm
        fm = domain.value(coords_m[0], coords_m[1], coords_m[2])
        left = (fm < 0.0) == (fa < 0.0)
        wa = np.where(left, wm, wa)
        fa = np.where(left, fm, fa)
        wb = np.where(left, wb, wm)
    w = 0.5 * (wa + wb)
    pts = np.empty((len(ray_i), 3))
    pts[:, o1] = s1[ray_i]
    pts[:, o2] = s2[ray_i]
    pts[:, axis] = w
    return pts, multi


def _polish_roots(domain, P, axes, ga, gb, fa, bisect_iters=10, newton_iters=5):
    """Batched root solve along mixed axes: bisection to a tight bracket,
    then bracket-clipped Newton using the domain gradient.

    P is (N,3) global points with P[i, axes[i]] free; brackets are global
    coordinates along the respective axis."""
    if len(axes) == 0:
        return np.zeros(0)
    idx = np.arange(len(axes))
    for _ in range(bisect_iters):
        gm = 0.5 * (ga + gb)
        P[idx, axes] = gm
        fm = domain.value(P[:, 0], P[:, 1], P[:, 2])
        left = (fm < 0.0) == (fa < 0.0)
        ga = np.where(left, gm, ga)
        fa = np.where(left, fm, fa)
        gb = np.where(left, gb, gm)
    w = 0.5 * (ga + gb)
    for _ in range(newton_iters):
        P[idx, axes] = w
        f = domain.value(P[:, 0], P[:, 1], P[:, 2])
        G = domain.gradient(P[:, 0], P[:, 1], P[:, 2])
        g = np.stack(np.broadcast_arrays(*G), axis=0)[axes, idx]
        g = np.where(np.abs(g) < 1e-30, 1e-30, g)
        w = np.clip(w - f / g, ga, gb)
    return w


@dataclass
class CellScan:
    """All boundary root data of one cell from a single batched scan."""

    ray_pts: dict          # axis -> (N,3) local points from rays along axis
    multi: dict            # axis -> number of rays crossing more than once
    edge_pts: np.ndarray   # (N,3) local points on cell edges
    face_pts: dict         # (axis, side) -> (N,2) local in-face trace points
    lattice_pts: np.ndarray  # (N,3) roots on the h/4 sub-grid lines


_FACE_STATIONS = np.arange(1, 8) / 8.0
_FACE_LEVELS = np.arange(9) / 8.0
_EDGE_LEVELS = np.linspace(0.0, 1.0, 9)


def scan_cell(domain, lo, h, fine) -> CellScan:
    """Bracket boundary crossings along rays, edges, face lines and the
    fine sample lattice, then solve all of them in one batched pass."""
    lo = np.asarray(lo, dtype=float)
    fixed = []     # (N,3) global, varying coord overwritten later
    axes = []
    ga, gb, fa = [], [], []
    tags = []      # redistribution keys

    def add_line_brackets(vals, levels, base, axis, tag):
        # vals (L,) along one line; base: global coords with base[axis] free
        signs = vals < 0.0
        flips = np.nonzero(signs[1:] != signs[:-1])[0]
        for k in flips:
            fixed.append(base.copy())
            axes.append(axis)
            ga.append(lo[axis] + h * levels[k])
            gb.append(lo[axis] + h * levels[k + 1])
            fa.append(vals[k])
            tags.append(tag)
        return len(flips)

    # rays along each axis from 5x5 stations
    st = _STATION_GRIDS[5]
    multi = {}
    for axis in range(3):
        o1, o2 = [d for d in range(3) if d != axis]
        g = np.asarray(np.meshgrid(st, st, indexing="ij"))
        s1, s2 = g[0].ravel(), g[1].ravel()
        coords = np.empty((3, len(s1), len(_RAY_LEVELS)))
        coords[o1] = lo[o1] + h * s1[:, None]
        coords[o2] = lo[o2] + h * s2[:, None]
        coords[axis] = lo[axis] + h * _RAY_LEVELS[None, :]
        vals = domain.value(coords[0], coords[1], coords[2])
        n_multi = 0
        for i in range(len(s1)):
            base = np.empty(3)
            base[o1] = lo[o1] + h * s1[i]
            base[o2] = lo[o2] + h * s2[i]
            c = add_line_brackets(vals[i], _RAY_LEVELS, base, axis, ("ray", axis))
            n_multi += c > 1
        multi[axis] = n_multi

    # the 12 cell edges
    for axis in range(3):
        o1, o2 = [d for d in range(3) if d != axis]
        for c1 in (0.0, 1.0):
            for c2 in (0.0, 1.0):
                coords = np.empty((3, len(_EDGE_LEVELS)))
                coords[o1] = lo[o1] + h * c1
                coords[o2] = lo[o2] + h * c2
                coords[axis] = lo[axis] + h * _EDGE_LEVELS
                vals = domain.value(coords[0], coords[1], coords[2])
                base = np.empty(3)
                base[o1] = lo[o1] + h * c1
                base[o2] = lo[o2] + h * c2
                add_line_brackets(vals, _EDGE_LEVELS, base, axis, ("edge",))

    # in-face sub-grid lines on the six faces
    for faxis in range(3):
        taxes = [d for d in range(3) if d != faxis]
        for side in (0, 1):
            plane = lo[faxis] + side * h
            for d_in in (0, 1):
                vary = taxes[d_in]
                fix = taxes[1 - d_in]
                coords = np.empty((3, len(_FACE_STATIONS), len(_FACE_LEVELS)))
                coords[faxis] = plane
                coords[fix] = lo[fix] + h * _FACE_STATIONS[:, None]
                coords[vary] = lo[vary] + h * _FACE_LEVELS[None, :]
                vals = domain.value(coords[0], coords[1], coords[2])
                for i, s_fix in enumerate(_FACE_STATIONS):
                    base = np.empty(3)
                    base[faxis] = plane
                    base[fix] = lo[fix] + h * s_fix
                    add_line_brackets(vals[i], _FACE_LEVELS, base, vary,
                                      ("face", faxis, side))

    # fine-lattice lines (no fresh evaluations needed for bracketing);
    # guarantees anchors even for slivers every station ray misses
    lev4 = np.arange(5) / 4.0
    if fine is not None:
        for axis in range(3):
            o1, o2 = [d for d in range(3) if d != axis]
            vals3 = np.moveaxis(fine, axis, -1)
            g = np.asarray(np.meshgrid(lev4, lev4, indexing="ij"))
            s1, s2 = g[0].ravel(), g[1].ravel()
            flat = vals3.reshape(-1, 5)
            for i in range(len(s1)):
                base = np.empty(3)
                base[o1] = lo[o1] + h * s1[i]
                base[o2] = lo[o2] + h * s2[i]
                add_line_brackets(flat[i], lev4, base, axis, ("lat",))

    fixed = np.asarray(fixed).reshape(-1, 3)
    axes = np.asarray(axes, dtype=int)
    roots = _polish_roots(domain, fixed.copy(), axes,
                          np.asarray(ga), np.asarray(gb), np.asarray(fa))

    scan = CellScan(ray_pts={0: [], 1: [], 2: []}, multi=multi,
                    edge_pts=[], face_pts={}, lattice_pts=[])
    for i, tag in enumerate(tags):
        p_local = (fixed[i] - lo) / h
        p_local[axes[i]] = (roots[i] - lo[axes[i]]) / h
        if tag[0] == "ray":
            scan.ray_pts[tag[1]].append(p_local)
        elif tag[0] == "edge":
            scan.edge_pts.append(p_local)
        elif tag[0] == "lat":
            scan.lattice_pts.append(p_local)
        else:
            _, faxis, side = tag
            taxes = [d for d in range(3) if d != faxis]
            scan.face_pts.setdefault((faxis, side), []).append(
                (p_local[taxes[0]], p_local[taxes[1]]))
    for axis in range(3):
        pts = scan.ray_pts[axis]
        scan.ray_pts[axis] = np.asarray(pts).reshape(-1, 3)
    scan.edge_pts = np.asarray(scan.edge_pts).reshape(-1, 3)
    scan.lattice_pts = np.asarray(scan.lattice_pts).reshape(-1, 3)
    for key in list(scan.face_pts):
        scan.face_pts[key] = np.asarray(scan.face_pts[key])
    return scan


def fit_patch_from_scan(scan: CellScan, normal) -> PatchFit:
    """Quadratic height fit from pre-scanned boundary points."""
    w_axis = int(np.argmax(np.abs(normal)))
    others = [d for d in range(3) if d != w_axis]
    perm = (others[0], others[1], w_axis)
    inside_below = normal[w_axis] > 0.0
    fold = scan.multi[w_axis] > 2

    pts = scan.ray_pts[w_axis]
    if len(pts) < 12:
        chunks = [pts] if len(pts) else []
        for axis in others:
            if len(scan.ray_pts[axis]):
                chunks.append(scan.ray_pts[axis])
        if len(scan.edge_pts):
            chunks.append(scan.edge_pts)
        if len(scan.lattice_pts):
            chunks.append(scan.lattice_pts)
        if chunks:
            pts = np.vstack(chunks)
    if len(pts):
        keep = np.all((pts > -_W_TOL) & (pts < 1.0 + _W_TOL), axis=1)
        pts = pts[keep]
    u = pts[:, others[0]] if len(pts) else np.zeros(0)
    v = pts[:, others[1]] if len(pts) else np.zeros(0)
    w = pts[:, w_axis] if len(pts) else np.zeros(0)
    n_pts = len(u)
    if n_pts >= 6:
        coef, res, ok = _lstsq_quadratic(u, v, w)
        if ok:
            return PatchFit(perm=perm, coeffs=tuple(coef), inside_below=inside_below,
                            residual=res, n_points=n_pts, fold=fold)
    if n_pts >= 3:
        coef, res, ok = _lstsq_planar(u, v, w)
        if ok:
            return PatchFit(perm=perm, coeffs=tuple(coef), inside_below=inside_below,
                            residual=res, planar=True, n_points=n_pts, fold=fold)
    return PatchFit(perm=perm, coeffs=(0.0,) * 6, inside_below=inside_below,
                    residual=np.inf, planar=True, ok=False, n_points=n_pts,
                    fold=fold)


def _lstsq_quadratic(u, v, w):
    X = np.column_stack([u * u, u * v, v * v, u, v, np.ones_like(u)])
    coef, _, rank, sv = np.linalg.lstsq(X, w, rcond=None)
    ok = rank == 6 and sv[-1] > 1e-8 * sv[0]
    res = float(np.max(np.abs(X @ coef - w))) if len(u) else np.inf
    return coef, res, ok


def _lstsq_planar(u, v, w):
    X = np.column_stack([u, v, np.ones_like(u)])
    coef, _, rank, _ = np.linalg.lstsq(X, w, rcond=None)
    res = float(np.max(np.abs(X @ coef - w))) if len(u) else np.inf
    full = np.array([0.0, 0.0, 0.0, coef[0], coef[1], coef[2]])
    return full, res, rank == 3


def _fine_lattice_roots(domain, lo, h, fine):
    """Boundary roots along the h/4 sub-grid lines, bracketed by the
    classifier's own fine-lattice sign data.

    Guaranteed to find at least one point for any cell the classifier marked
    cut, however small the cut region."""
    levels4 = np.arange(5) / 4.0
    pts = []
    for axis in range(3):
        vals = np.moveaxis(fine, axis, -1).reshape(-1, 5)
        signs = vals < 0.0
        flips = signs[:, 1:] != signs[:, :-1]
        line_i, lev_i = np.nonzero(flips)
        if len(line_i) == 0:
            continue
        o1, o2 = [d for d in range(3) if d != axis]
        g = np.asarray(np.meshgrid(levels4, levels4, indexing="ij"))
        s1 = g[0].ravel()[line_i]
        s2 = g[1].ravel()[line_i]
        wa = levels4[lev_i]
        wb = levels4[lev_i + 1]
        fa = vals[line_i, lev_i]
        coords = np.empty((3, len(line_i)))
        coords[o1] = lo[o1] + h * s1
        coords[o2] = lo[o2] + h * s2
        for _ in range(46):
            wm = 0.5 * (wa + wb)
            coords[axis] = lo[axis] + h * wm
            fm = domain.value(coords[0], coords[1], coords[2])
            left = (fm < 0.0) == (fa < 0.0)
            wa = np.where(left, wm, wa)
            fa = np.where(left, fm, fa)
            wb = np.where(left, wb, wm)
        out = np.empty((len(line_i), 3))
        out[:, o1] = s1
        out[:, o2] = s2
        out[:, axis] = 0.5 * (wa + wb)
        pts.append(out)
    return np.vstack(pts) if pts else np.zeros((0, 3))


def _tangent_plane_fit(domain, lo, h, fine, normal) -> PatchFit:
    """Plane from the linearized implicit function, anchored at the
    minority-sign corner of the fine sample lattice; last-resort fallback
    for cells whose boundary samples cannot support any least squares."""
    lo = np.asarray(lo, dtype=float)
    w_axis = int(np.argmax(np.abs(normal)))
    others = [d for d in range(3) if d != w_axis]
    perm = (others[0], others[1], w_axis)
    inside_below = normal[w_axis] > 0.0
    c = lo + 0.5 * h
    if fine is not None:
        neg = fine < 0.0
        minority = neg if neg.sum() <= neg.size // 2 else ~neg
        if minority.any():
            ijk = np.argwhere(minority).mean(axis=0) / 4.0
            c = lo + h * ijk
    val = float(domain.value(np.array(c[0]), np.array(c[1]), np.array(c[2])))
    gr = np.array(domain.gradient(np.array(c[0]), np.array(c[1]), np.array(c[2])),
                  dtype=float).ravel()
    ns = gr / max(np.linalg.norm(gr), 1e-300)
    nw = ns[w_axis]
    if abs(nw) < 1e-12:
        nw = 1e-12 if nw >= 0.0 else -1e-12
    cl = (c - lo) / h
    d = -ns[others[0]] / nw
    e = -ns[others[1]] / nw
    g = cl[w_axis] - val / (h * nw) - cl[others[0]] * d - cl[others[1]] * e
    coef = np.array([0.0, 0.0, 0.0, d, e, g])
    return PatchFit(perm=perm, coeffs=tuple(coef), inside_below=inside_below,
                    residual=np.inf, planar=True, ok=False)


def fit_boundary_patch(domain: ImplicitDomain, lo, h: float,
                       normal=None, fine=None) -> PatchFit:
    """Fit w = p(u,v) to boundary samples inside the cell box [lo, lo+h]^3.

    The height axis is the one most aligned with the (average) normal.
    Root samples come from bisection along sub-grid lines parallel to the
    height axis; corner slivers that those rays miss are covered by roots
    bracketed on the classifier's fine sample lattice and by lines parallel
    to the other two axes.
    """
    lo = np.asarray(lo, dtype=float)
    if normal is None:
        c = lo + 0.5 * h
        normal = np.array(domain.gradient(c[0], c[1], c[2]), dtype=float)
    w_axis = int(np.argmax(np.abs(normal)))
    others = [d for d in range(3) if d != w_axis]
    perm = (others[0], others[1], w_axis)
    inside_below = normal[w_axis] > 0.0

    pts, multi_w = _axis_roots(domain, lo, h, w_axis, _STATION_GRIDS[5])
    fold = multi_w > 2
    if len(pts) < 12 and not fold:
        extra, multi_w9 = _axis_roots(domain, lo, h, w_axis, _STATION_GRIDS[9])
        fold = multi_w9 > 4
        if len(extra) > len(pts):
            pts = extra
        if len(pts) < 12:
            chunks = [pts] if len(pts) else []
            for axis in others:
                more, _ = _axis_roots(domain, lo, h, axis, _STATION_GRIDS[5])
                if len(more):
                    chunks.append(more)
            if fine is not None:
                lat = _fine_lattice_roots(domain, lo, h, fine)
                if len(lat):
                    chunks.append(lat)
            pts = np.vstack(chunks) if chunks else pts
    if len(pts):
        keep = (pts[:, w_axis] > -_W_TOL) & (pts[:, w_axis] < 1.0 + _W_TOL)
        in_cell = np.all((pts[:, others] > -_W_TOL) &
                         (pts[:, others] < 1.0 + _W_TOL), axis=1)
        pts = pts[keep & in_cell]
    u = pts[:, others[0]] if len(pts) else np.zeros(0)
    v = pts[:, others[1]] if len(pts) else np.zeros(0)
    w = pts[:, w_axis] if len(pts) else np.zeros(0)
    n_pts = len(u)

    if n_pts >= 6:
        coef, res, ok = _lstsq_quadratic(u, v, w)
        if ok:
            return PatchFit(perm=perm, coeffs=tuple(coef), inside_below=inside_below,
                            residual=res, n_points=n_pts, fold=fold)
    if n_pts >= 3:
        coef, res, ok = _lstsq_planar(u, v, w)
        if ok:
            return PatchFit(perm=perm, coeffs=tuple(coef), inside_below=inside_below,
                            residual=res, planar=True, n_points=n_pts, fold=fold)
    out = _tangent_plane_fit(domain, lo, h, fine, normal)
    out.n_points = n_pts
    out.fold = fold
    return out


def refine_fit_area_weighted(domain, lo, h, fit: PatchFit, q: int = 6) -> PatchFit:
    """Refit the patch with samples at the area-measure quadrature points.

    The first fit's residual is O(h^3) but need not average to zero over the
    patch domain, which is what surface- and volume-average accuracy rides
    on.  Re-rooting the boundary at the patch region's own rule points and
    solving the weighted least squares there makes the residual orthogonal
    to the quadratic basis in the area measure.  Roots come from clipped
    Newton iteration seeded at the current fit.
    """
    rect = (0.0, 1.0, 0.0, 1.0)
    region = build_region(rect, [conic_from_height(fit.coeffs, +1.0, 0.0),
                                 conic_from_height(fit.coeffs, -1.0, 1.0)])
    pts2, wgt = region.rule(q)
    if len(wgt) < 6:
        return fit
    u, v = pts2[:, 0], pts2[:, 1]
    a, b, c, d, e, g = fit.coeffs
    w_est = a * u * u + b * u * v + c * v * v + d * u + e * v + g
    halo = max(8.0 * min(fit.residual, 0.05), 2e-3)
    w_lo, w_hi = w_est - halo, w_est + halo

    perm = fit.perm
    coords = np.empty((3, len(u)))
    coords[perm[0]] = lo[perm[0]] + h * u
    coords[perm[1]] = lo[perm[1]] + h * v
    w = w_est.copy()
    for _ in range(7):
        coords[perm[2]] = lo[perm[2]] + h * w
        f = domain.value(coords[0], coords[1], coords[2])
        G = domain.gradient(coords[0], coords[1], coords[2])
        gw = np.broadcast_arrays(*G)[perm[2]]
        gw = np.where(np.abs(gw) < 1e-30, 1e-30, gw)
        w = np.clip(w - f / (gw * h), w_lo, w_hi)
    coords[perm[2]] = lo[perm[2]] + h * w
    f = domain.value(coords[0], coords[1], coords[2])
    good = np.abs(f) < 1e-9 * h
    if good.sum() < 6:
        return fit
    u, v, w, wgt = u[good], v[good], w[good], wgt[good]
    X = np.column_stack([u * u, u * v, v * v, u, v, np.ones_like(u)])
    sw = np.sqrt(wgt)
    coef, _, rank, sv = np.linalg.lstsq(X * sw[:, None], w * sw, rcond=None)
    if rank < 6 or sv[-1] <= 1e-10 * sv[0]:
        return fit
    res = float(np.max(np.abs(X @ coef - w)))
    return PatchFit(perm=perm, coeffs=tuple(coef), inside_below=fit.inside_below,
                    residual=res, n_points=len(u), fold=fit.fold)


# ---------------------------------------------------------------------------
# per-cell geometry from a fitted patch

_SWAP = (2, 1, 0, 4, 3, 5)  # conic coefficient permutation swapping u <-> v


def _swap_conic(k):
    return np.asarray(k)[list(_SWAP)]


def _restrict_to_u(coeffs, u_val):
    """p(u_val, v) as (quadratic, linear, const) in v."""
    a, b, c, d, e, g = coeffs
    return c, b * u_val + e, a * u_val * u_val + d * u_val + g


def _restrict_to_v(coeffs, v_val):
    a, b, c, d, e, g = coeffs
    return a, b * v_val + d, c * v_val * v_val + e * v_val + g


def _face_conic(fit: PatchFit, local_axis: int, side: int):
    """Inside-region constraint on a cell face, in face-local coordinates.

    Face-local (s, t) are the two global axes other than the face axis, in
    ascending order; returns the conic for {inside} >= 0 on that face.
    """
    sign = 1.0 if fit.inside_below else -1.0
    w_axis = fit.perm[2]
    if local_axis == 2:
        # top/bottom face: constraint sign*(p(u,v) - side) >= 0
        k_uv = conic_from_height(fit.coeffs, sign, float(side))
        face_axis = w_axis
        s_axis, t_axis = [d for d in range(3) if d != face_axis]
        # k_uv is in (u, v) = (perm[0], perm[1]); reorder to (s, t)
        if (fit.perm[0], fit.perm[1]) == (s_axis, t_axis):
            return face_axis, k_uv
        return face_axis, _swap_conic(k_uv)
    # side faces: constraint sign*(p|_{u or v = side}(other) - w) >= 0
    if local_axis == 0:
        q2, q1, q0 = _restrict_to_u(fit.coeffs, float(side))
        face_axis = fit.perm[0]
        other_axis = fit.perm[1]
    else:
        q2, q1, q0 = _restrict_to_v(fit.coeffs, float(side))
        face_axis = fit.perm[1]
        other_axis = fit.perm[0]
    # in (other, w) coordinates: sign*(q2 other^2 + q1 other + q0 - w) >= 0
    k = sign * np.array([q2, 0.0, 0.0, q1, -1.0, q0])
    if other_axis < w_axis:
        return face_axis, k
    return face_axis, _swap_conic(k)


def trace_face_region(vals, h, trace_pts):
    """Aperture region on one cell face from a conic fitted to the boundary
    trace on that face.

    ``vals`` are the implicit values on the face's 5x5 sample lattice and
    ``trace_pts`` the pre-computed in-face boundary points (edge crossings
    plus sub-grid line roots).  The trace points pin the conic; the sampled
    values act as weak shape regularization.  This keeps aperture accuracy
    independent of the volume patch's least-squares residual.

    Returns "full", "empty", a Region2D, or None when a reliable conic
    cannot be fitted (caller falls back to the patch-derived face region).
    """
    tolz = _ZERO_TOL * h
    if vals.max() <= tolz:
        return "full"
    if vals.min() >= -tolz:
        return "empty"
    if len(trace_pts) < 2:
        return None
    pts = np.asarray(trace_pts)
    lev = np.arange(5) / 4.0
    g = np.asarray(np.meshgrid(lev, lev, indexing="ij"))
    su, sv = g[0].ravel(), g[1].ravel()
    X_trace = np.column_stack([pts[:, 0] ** 2, pts[:, 0] * pts[:, 1],
                               pts[:, 1] ** 2, pts[:, 0], pts[:, 1],
                               np.ones(len(pts))])
    X_shape = np.column_stack([su * su, su * sv, sv * sv, su, sv,
                               np.ones_like(su)])
    W_TR = 1e4
    A = np.vstack([W_TR * X_trace, X_shape])
    b = np.concatenate([np.zeros(len(pts)), -vals.ravel() / h])
    coef, _, rank, sv_ = np.linalg.lstsq(A, b, rcond=None)
    if rank < 6 or sv_[-1] <= 1e-12 * sv_[0]:
        return None
    # the fitted conic must not disagree in sign with the implicit values
    # away from the trace (a stray second branch would)
    k_at = X_shape @ coef
    clearly = np.abs(vals.ravel()) / h > 0.15
    if np.any(clearly & ((k_at > 0.0) != (vals.ravel() < 0.0))):
        return None
    region = build_region((0.0, 1.0, 0.0, 1.0), [coef])
    # sanity: area must roughly agree with the sampled inside fraction
    frac = float((vals.ravel() < 0.0).mean())
    if abs(region.area(6) - frac) > 0.25:
        return None
    return region


@dataclass
class CellPieces:
    """Scaled-local geometry of a single-sheet cut region in a box."""

    volume: float
    centroid_local: np.ndarray
    vol_pts_local: np.ndarray
    vol_wts_local: np.ndarray           # in units of scale^3
    patch_region: Region2D
    face_regions: dict                  # (global_axis, side) -> Region2D (face frame)
    face_area: np.ndarray               # (3,2) in units of scale^2


def build_cell_pieces(fit: PatchFit, q: int = 10, q_w: int = 5,
                      faces: bool = True) -> CellPieces:
    """Cut-region geometry in the unit box for a height-function sheet.

    The in-plane order q must resolve the curved region arcs; the column
    direction is smooth, so q_w stays low.  With ``faces=False`` the
    (patch-derived) face regions are skipped; callers that fit face regions
    to the boundary trace directly use that.
    """
    p = fit.coeffs
    below = fit.inside_below
    rect = (0.0, 1.0, 0.0, 1.0)
    d_patch = build_region(rect, [conic_from_height(p, +1.0, 0.0),
                                  conic_from_height(p, -1.0, 1.0)])
    if below:
        d_full = build_region(rect, [conic_from_height(p, +1.0, 1.0)])
    else:
        d_full = build_region(rect, [conic_from_height(p, -1.0, 0.0)])

    def p_eval(u, v):
        a, b, c, d, e, g = p
        return a * u * u + b * u * v + c * v * v + d * u + e * v + g

    pts_list, wts_list = [], []
    if below:
        pts, wts = column_volume_rule(d_patch, 0.0, lambda u, v: np.clip(p_eval(u, v), 0.0, 1.0), q, q_w)
    else:
        pts, wts = column_volume_rule(d_patch, lambda u, v: np.clip(p_eval(u, v), 0.0, 1.0), 1.0, q, q_w)
    pts_list.append(pts), wts_list.append(wts)
    pts, wts = column_volume_rule(d_full, 0.0, 1.0, q, q_w)
    pts_list.append(pts), wts_list.append(wts)
    vol_pts = np.vstack(pts_list)
    vol_wts = np.concatenate(wts_list)
    volume = float(vol_wts.sum())
    centroid = (vol_wts @ vol_pts) / volume if volume > 0 else np.full(3, 0.5)

    face_regions = {}
    face_area = np.zeros((3, 2))
    if faces:
        for local_axis in range(3):
            for side in (0, 1):
                gaxis, k = _face_conic(fit, local_axis, side)
                reg = build_region(rect, [k])
                face_regions[(gaxis, side)] = reg
                face_area[gaxis, side] = reg.area(6)
    return CellPieces(volume=volume, centroid_local=centroid,
                      vol_pts_local=vol_pts, vol_wts_local=vol_wts,
                      patch_region=d_patch, face_regions=face_regions,
                      face_area=face_area)


def _component_from_pieces(cell, comp_id, lo, h, fit, pieces, q=8,
                           flagged=False) -> ComponentGeometry:
    # map local w-frame points (u, v, w) to global
    pts = np.empty_like(pieces.vol_pts_local)
    pts[:, fit.perm[0]] = lo[fit.perm[0]] + h * pieces.vol_pts_local[:, 0]
    pts[:, fit.perm[1]] = lo[fit.perm[1]] + h * pieces.vol_pts_local[:, 1]
    pts[:, fit.perm[2]] = lo[fit.perm[2]] + h * pieces.vol_pts_local[:, 2]
    wts = pieces.vol_wts_local * h ** 3
    centroid = np.empty(3)
    centroid[fit.perm[0]] = lo[fit.perm[0]] + h * pieces.centroid_local[0]
    centroid[fit.perm[1]] = lo[fit.perm[1]] + h * pieces.centroid_local[1]
    centroid[fit.perm[2]] = lo[fit.perm[2]] + h * pieces.centroid_local[2]

    patch = HeightPatch(perm=fit.perm, origin=lo, scale=h, coeffs=fit.coeffs,
                        region=pieces.patch_region,
                        orient=1 if fit.inside_below else -1,
                        fit_residual=fit.residual, planar_fallback=fit.planar)
    rule = patch.rule(q)
    patch._rules.clear()
    pieces.patch_region._rules.clear()
    comp = ComponentGeometry(cell=tuple(cell), comp=comp_id,
                             volume=pieces.volume * h ** 3,
                             centroid=centroid, vol_pts=pts, vol_wts=wts,
                             patches=[patch], surf_pts=rule.points,
                             surf_wts=rule.weights, surf_normals=rule.normals,
                             face_area=pieces.face_area * h * h,
                             flagged=flagged or not fit.ok)
    return comp


def _merge_component_parts(cell, comp_id, parts) -> ComponentGeometry:
    """Aggregate sub-voxel ComponentGeometry parts into one component."""
    vol = sum(p.volume for p in parts)
    pts = np.vstack([p.vol_pts for p in parts if len(p.vol_wts)])
    wts = np.concatenate([p.vol_wts for p in parts if len(p.vol_wts)])
    centroid = (wts @ pts) / vol if vol > 0 else parts[0].centroid
    patches = [pp for p in parts for pp in p.patches]
    sp = [p.surf_pts for p in parts if p.surf_pts is not None and len(p.surf_wts)]
    comp = ComponentGeometry(
        cell=tuple(cell), comp=comp_id, volume=vol, centroid=centroid,
        vol_pts=pts, vol_wts=wts, patches=patches,
        surf_pts=np.vstack(sp) if sp else np.zeros((0, 3)),
        surf_wts=np.concatenate([p.surf_wts for p in parts
                                 if p.surf_wts is not None and len(p.surf_wts)])
        if sp else np.zeros(0),
        surf_normals=np.vstack([p.surf_normals for p in parts
                                if p.surf_normals is not None and len(p.surf_wts)])
        if sp else np.zeros((0, 3)),
        face_area=sum(p.face_area for p in parts),
        flagged=any(p.flagged for p in parts))
    return comp


def build_subvoxel_geometry(domain, grid, idx, fine, labels, q=10,
                            q_w=5) -> CellGeometry:
    """Per-component geometry of a multi-component (or folded) cut cell,
    assembled from h/4 sub-voxel pieces."""
    h = grid.h
    hs = h / 4.0
    lo = grid.cell_lo(idx)
    tolz = _ZERO_TOL * h
    neg_centers = np.argwhere(labels > 0)
    parts: dict = {}

    for si in range(4):
        for sj in range(4):
            for sk in range(4):
                corners = fine[si:si + 2, sj:sj + 2, sk:sk + 2]
                cmin, cmax = corners.min(), corners.max()
                if cmin > -tolz:
                    continue  # no inside volume in this sub-voxel
                lab = int(labels[si, sj, sk])
                if lab == 0:
                    # sliver without its own negative center: nearest component
                    if len(neg_centers):
                        d = np.abs(neg_centers - np.array([si, sj, sk])).sum(axis=1)
                        lab = int(labels[tuple(neg_centers[np.argmin(d)])])
                    else:
                        lab = 1
                parts.setdefault(lab, [])
                sub_lo = lo + hs * np.array([si, sj, sk])
                sub_cell_face = np.array([si, sj, sk])
                if cmax < tolz:
                    # fully inside sub-voxel
                    part = _interior_subvoxel(sub_lo, hs, sub_cell_face)
                else:
                    fit = fit_boundary_patch(domain, sub_lo, hs)
                    if fit.ok and not fit.fold:
                        fit = refine_fit_area_weighted(domain, sub_lo, hs, fit, q=8)
                        fit = refine_fit_area_weighted(domain, sub_lo, hs, fit, q=8)
                    pieces = build_cell_pieces(fit, q=q, q_w=q_w)
                    part = _component_from_pieces(idx, lab, sub_lo, hs, fit,
                                                  pieces, q=q)
                    part = _restrict_faces_to_parent(part, sub_cell_face)
                parts[lab].append(part)

    comps = []
    for k in sorted(parts):
        if parts[k]:
            comps.append(_merge_component_parts(idx, k - 1, parts[k]))
    for new_id, comp in enumerate(comps):
        comp.comp = new_id
    volume = sum(c.volume for c in comps)
    apertures = sum((c.face_area for c in comps), np.zeros((3, 2)))
    return CellGeometry(classification=CUT, components=comps, volume=volume,
                        apertures=apertures, labels=labels)


def _interior_subvoxel(sub_lo, hs, offsets) -> ComponentGeometry:
    # 3x3x3 tensor Gauss rule: exact through degree 5, enough for the
    # degree-4 moment tables
    from .quadrature import gauss_legendre
    gl = gauss_legendre(3)
    x, wx = gl.mapped(sub_lo[0], sub_lo[0] + hs)
    y, wy = gl.mapped(sub_lo[1], sub_lo[1] + hs)
    z, wz = gl.mapped(sub_lo[2], sub_lo[2] + hs)
    X, Y, Z = np.meshgrid(x, y, z, indexing="ij")
    W = wx[:, None, None] * wy[None, :, None] * wz[None, None, :]
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    face_area = np.zeros((3, 2))
    for axis in range(3):
        if offsets[axis] == 0:
            face_area[axis, 0] = hs * hs
        if offsets[axis] == 3:
            face_area[axis, 1] = hs * hs
    return ComponentGeometry(cell=None, comp=0, volume=hs ** 3,
                             centroid=sub_lo + 0.5 * hs,
                             vol_pts=pts, vol_wts=W.ravel(),
                             face_area=face_area)


def _restrict_faces_to_parent(part: ComponentGeometry, offsets) -> ComponentGeometry:
    keep = np.zeros((3, 2))
    for axis in range(3):
        if offsets[axis] == 0:
            keep[axis, 0] = 1.0
        if offsets[axis] == 3:
            keep[axis, 1] = 1.0
    part.face_area = part.face_area * keep
    return part


def classify_and_build(domain: ImplicitDomain, grid: GridSpec, q: int = 10,
                       q_w: int = 5, q_surf: int = 8,
                       theta_reclass: float = 1e-9) -> GridGeometry:
    """Classify every cell and build cut-cell geometry.

    ``q`` is the in-plane quadrature order of the curved-region rules (the
    conic arcs need it), ``q_w`` the smooth column order and ``q_surf`` the
    stored surface-rule order.  Cells whose reconstructed volume is
    indistinguishable from full (empty) are reclassified interior
    (exterior) to keep the classification invariants exact.
    """
    geom = GridGeometry(domain, grid)
    cls, fine = classify_cells(domain, grid)
    geom.classification = cls
    cut_idx = [tuple(int(v) for v in t) for t in np.argwhere(cls == CUT)]
    if not cut_idx:
        return geom

    h = grid.h
    centers = np.asarray([grid.cell_center(c) for c in cut_idx])
    gx, gy, gz = domain.gradient(centers[:, 0], centers[:, 1], centers[:, 2])
    normals = np.column_stack([gx, gy, gz])

    center_signs = _center_signs(domain, grid, cut_idx)
    struct = ndimage.generate_binary_structure(3, 1)

    for n, idx in enumerate(cut_idx):
        labels, n_comp = ndimage.label(center_signs[n], structure=struct)
        if n_comp <= 1:
            lo = grid.cell_lo(idx)
            scan = scan_cell(domain, lo, h, fine[idx])
            fit = fit_patch_from_scan(scan, normals[n])
            if not fit.ok:
                fit = _tangent_plane_fit(domain, lo, h, fine[idx], normals[n])
            if fit.ok and not fit.fold:
                fit = refine_fit_area_weighted(domain, lo, h, fit, q=8)
                fit = refine_fit_area_weighted(domain, lo, h, fit, q=8)
            if fit.fold:
                cellgeom = build_subvoxel_geometry(domain, grid, idx,
                                                   fine[idx], labels, q=q, q_w=q_w)
            else:
                pieces = build_cell_pieces(fit, q=q, q_w=q_w, faces=False)
                comp = _component_from_pieces(idx, 0, lo, h, fit, pieces,
                                              q=q_surf)
                face_info = {}
                for axis in range(3):
                    taxes = [d for d in range(3) if d != axis]
                    for side in (0, 1):
                        sl = [slice(None)] * 3
                        sl[axis] = -1 if side else 0
                        vals = fine[idx][tuple(sl)]
                        trace_pts = list(scan.face_pts.get((axis, side), []))
                        if len(scan.edge_pts):
                            on_face = np.abs(scan.edge_pts[:, axis] - side) < 1e-9
                            for p in scan.edge_pts[on_face]:
                                trace_pts.append((p[taxes[0]], p[taxes[1]]))
                        res = trace_face_region(vals, h, trace_pts)
                        if res == "full":
                            face_info[(axis, side)] = "full"
                            comp.face_area[axis, side] = h * h
                        elif res == "empty":
                            face_info[(axis, side)] = "empty"
                            comp.face_area[axis, side] = 0.0
                        elif res is not None:
                            face_info[(axis, side)] = res.branches[0].k
                            comp.face_area[axis, side] = res.area(6) * h * h
                        else:
                            _, k_fb = _face_conic(fit, fit.perm.index(axis), side)
                            reg = build_region((0.0, 1.0, 0.0, 1.0), [k_fb])
                            comp.face_area[axis, side] = reg.area(6) * h * h
                cellgeom = CellGeometry(classification=CUT, components=[comp],
                                        volume=comp.volume,
                                        apertures=comp.face_area.copy(),
                                        labels=labels, fit=fit,
                                        face_info=face_info)
        else:
            cellgeom = build_subvoxel_geometry(domain, grid, idx, fine[idx],
                                               labels, q=q, q_w=q_w)

        h3 = h ** 3
        if cellgeom.volume >= (1.0 - theta_reclass) * h3 and \
                all(not c.patches or c.patch_area < theta_reclass * h * h
                    for c in cellgeom.components):
            geom.classification[idx] = INTERIOR
        elif cellgeom.volume <= theta_reclass * h3:
            geom.classification[idx] = EXTERIOR
        else:
            geom.cut_cells[idx] = cellgeom
    return geom
