"""Fourth-order discrete Laplacian assembly.

Cells whose 13-point cross stencil closes over interior cells (directly or
through rectangular-wall ghost fills) get the standard finite-volume row;
everything else gets a weighted-least-squares row fitted on a poised
lattice of merged-cell averages plus boundary-surface conditions.  Rows are
routed into the block system

    [L11 L12] [phi1]   [r1]
    [L21 L22] [phi2] = [r2],     r = f - N g,

with phi1 the standard-stencil unknowns.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb

import numpy as np

from .cutcell import CUT, EXTERIOR, INTERIOR, GridGeometry
from .domain import DIRICHLET, NEUMANN, ROBIN, BoundaryConditionSpec
from .errors import StructuralError
from .merging import MergeResult
from .plg import generate_cell_lattice, lattice_size
from .quadrature import gauss_legendre
from .sparse import SparseMatrix

STENCIL_1D = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0

# ghost-fill coefficients: value at the first and second ghost cell from the
# four interior cells walking inward from the wall, plus the face-data term
GHOST_DIRICHLET = (
    (np.array([-77.0, 43.0, -17.0, 3.0]) / 12.0, 60.0 / 12.0),
    (np.array([-505.0, 335.0, -145.0, 27.0]) / 12.0, 300.0 / 12.0),
)
GHOST_NEUMANN = (
    (np.array([5.0, 9.0, -5.0, 1.0]) / 10.0, 12.0 / 10.0),   # data term * h
    (np.array([-15.0, 29.0, -15.0, 3.0]) / 2.0, 12.0 / 2.0),
)


def monomial_exponents(n: int, D: int = 3):
    out = [k for k in itertools.product(range(n + 1), repeat=D) if sum(k) <= n]
    out.sort(key=lambda k: (sum(k), k))
    return out


def laplacian_map(exps):
    """Matrix M with Delta basis_j = sum_i M[i, j] basis_i (h-scaled frame)."""
    index = {e: i for i, e in enumerate(exps)}
    M = np.zeros((len(exps), len(exps)))
    for j, (a, b, c) in enumerate(exps):
        for d, e in ((0, (a - 2, b, c)), (1, (a, b - 2, c)), (2, (a, b, c - 2))):
            k = (a, b, c)[d]
            if k >= 2:
                M[index[e], j] += k * (k - 1)
    return M


def eval_basis(pts, center, h, exps):
    """Vandermonde of the h-scaled centered monomials at (N,3) points."""
    X = (np.asarray(pts) - np.asarray(center)) / h
    nmax = max(max(e) for e in exps)
    pows = [np.vander(X[:, d], nmax + 1, increasing=True) for d in range(3)]
    V = np.empty((len(X), len(exps)))
    for j, (a, b, c) in enumerate(exps):
        V[:, j] = pows[0][:, a] * pows[1][:, b] * pows[2][:, c]
    return V


def eval_basis_normal_deriv(pts, normals, center, h, exps):
    """Normal derivative of the scaled basis at surface points (per length)."""
    X = (np.asarray(pts) - np.asarray(center)) / h
    nrm = np.asarray(normals)
    nmax = max(max(e) for e in exps)
    pows = [np.vander(X[:, d], nmax + 1, increasing=True) for d in range(3)]
    V = np.zeros((len(X), len(exps)))
    for j, (a, b, c) in enumerate(exps):
        if a > 0:
            V[:, j] += a * pows[0][:, a - 1] * pows[1][:, b] * pows[2][:, c] * nrm[:, 0]
        if b > 0:
            V[:, j] += b * pows[0][:, a] * pows[1][:, b - 1] * pows[2][:, c] * nrm[:, 1]
        if c > 0:
            V[:, j] += c * pows[0][:, a] * pows[1][:, b] * pows[2][:, c - 1] * nrm[:, 2]
    return V / h


def recenter_matrix(delta, exps, cache={}):
    """R with basis_target_j = sum_k R[j,k] basis_own_k for integer shifts."""
    key = tuple(np.round(np.asarray(delta), 12))
    got = cache.get(key)
    if got is not None:
        return got
    n = len(exps)
    R = np.zeros((n, n))
    index = {e: i for i, e in enumerate(exps)}
    for j, a in enumerate(exps):
        # ((x-c)/h)^a = prod_d (own_d + delta_d)^{a_d}
        for b in itertools.product(*[range(ad + 1) for ad in a]):
            coeff = 1.0
            for d in range(3):
                coeff *= comb(a[d], b[d]) * key[d] ** (a[d] - b[d])
            R[j, index[b]] += coeff
    cache[key] = R
    return R


class MomentTables:
    """Per-component basis moments in each component's own frame, recentered
    on demand to any target cell frame (integer shifts of h)."""

    def __init__(self, geom: GridGeometry, merge: MergeResult, n: int):
        self.geom = geom
        self.merge = merge
        self.h = geom.grid.h
        self.exps = monomial_exponents(n)
        self.nb = len(self.exps)
        # closed-form moments of a full cell about its own center
        one_d = np.array([(0.5 ** k) / (k + 1) * (1 + (-1) ** k)
                          for k in range(n + 1)])
        self.interior_m = np.array([one_d[a] * one_d[b] * one_d[c]
                                    for (a, b, c) in self.exps]) * self.h ** 3
        self._vol = {}
        self._surf = {}

    def cell_center(self, cell):
        return self.geom.grid.cell_center(cell)

    def vol_moments(self, cell, comp_k):
        """Volume moments of one component about its own cell center."""
        key = (cell, comp_k)
        got = self._vol.get(key)
        if got is not None:
            return got
        g = self.geom[cell]
        if g.classification == INTERIOR:
            out = self.interior_m
        else:
            comp = g.components[comp_k]
            V = eval_basis(comp.vol_pts, self.cell_center(cell), self.h, self.exps)
            out = comp.vol_wts @ V
        self._vol[key] = out
        return out

    def surf_moments(self, cell, comp_k):
        """(area, basis moments, normal-derivative moments) of a component's
        boundary patch about its own cell center."""
        key = (cell, comp_k)
        got = self._surf.get(key)
        if got is not None:
            return got
        comp = self.geom[cell].components[comp_k]
        if comp.surf_wts is None or len(comp.surf_wts) == 0:
            out = (0.0, None, None)
        else:
            c = self.cell_center(cell)
            V = eval_basis(comp.surf_pts, c, self.h, self.exps)
            Vn = eval_basis_normal_deriv(comp.surf_pts, comp.surf_normals,
                                         c, self.h, self.exps)
            out = (float(comp.surf_wts.sum()), comp.surf_wts @ V,
                   comp.surf_wts @ Vn)
        self._surf[key] = out
        return out

    def merged_vol_moments(self, merged, center):
        """Aggregate volume moments about an arbitrary cell-center frame."""
        h = self.h
        total = np.zeros(self.nb)
        for (cell, k) in merged.members:
            own = self.vol_moments(cell, k)
            delta = (self.cell_center(cell) - center) / h
            total += recenter_matrix(delta, self.exps) @ own
        return total


@dataclass
class StencilRow:
    """One discrete-Laplacian row over merged-cell unknowns."""

    target: int                    # merged id
    cells: dict                    # merged id -> coefficient
    data: dict = field(default_factory=dict)   # data column id -> coefficient
    order: int = 4                 # truncation-order tag


@dataclass
class DataColumn:
    kind: str                      # "wall" | "patch"
    key: tuple                     # wall: (cell, axis, side); patch: (cell, comp)
    bc_kind: str


@dataclass
class OperatorBlocks:
    """Blocked operator L plus the boundary-data matrix N."""

    h: float
    phi1_ids: list
    phi2_ids: list
    slot_of: dict                  # merged id -> global slot (phi1 then phi2)
    L11: SparseMatrix
    L12: SparseMatrix
    L21: SparseMatrix
    L22: SparseMatrix
    N: SparseMatrix
    data_columns: list
    merge: MergeResult
    geom: GridGeometry
    lattices: dict = None

    @property
    def n1(self):
        return len(self.phi1_ids)

    @property
    def n2(self):
        return len(self.phi2_ids)

    @property
    def n(self):
        return self.n1 + self.n2

    def full_matrix(self):
        from scipy import sparse as sp
        top = sp.hstack([self.L11.to_scipy(), self.L12.to_scipy()])
        bot = sp.hstack([self.L21.to_scipy(), self.L22.to_scipy()])
        return SparseMatrix.from_scipy(sp.vstack([top, bot]).tocsr())

    def apply(self, phi):
        n1 = self.n1
        out = np.empty(self.n)
        out[:n1] = self.L11.matvec(phi[:n1]) + self.L12.matvec(phi[n1:])
        out[n1:] = self.L21.matvec(phi[:n1]) + self.L22.matvec(phi[n1:])
        return out

    def evaluate_boundary_data(self, bc: BoundaryConditionSpec):
        """Face/patch averages of the boundary data, one entry per column."""
        geom = self.geom
        h = self.h
        gl = gauss_legendre(6)
        out = np.zeros(len(self.data_columns))
        for j, col in enumerate(self.data_columns):
            if col.kind == "wall":
                cell, axis, side = col.key
                lo = geom.grid.cell_lo(cell)
                plane = lo[axis] + side * h
                normal = np.zeros(3)
                normal[axis] = 1.0 if side else -1.0
                t0, t1 = [d for d in range(3) if d != axis]
                xs, wx = gl.mapped(lo[t0], lo[t0] + h)
                ys, wy = gl.mapped(lo[t1], lo[t1] + h)
                X, Y = np.meshgrid(xs, ys, indexing="ij")
                W = np.outer(wx, wy)
                pts = np.empty((X.size, 3))
                pts[:, axis] = plane
                pts[:, t0] = X.ravel()
                pts[:, t1] = Y.ravel()
                bcw = bc.wall
                vals = bcw.data(pts[:, 0], pts[:, 1], pts[:, 2],
                                np.full(X.size, normal[0]),
                                np.full(X.size, normal[1]),
                                np.full(X.size, normal[2]))
                out[j] = float(np.dot(W.ravel(), vals) / (h * h))
            else:
                cell, comp_k = col.key
                comp = geom[cell].components[comp_k]
                bcs = bc.surface
                vals = bcs.data(comp.surf_pts[:, 0], comp.surf_pts[:, 1],
                                comp.surf_pts[:, 2], comp.surf_normals[:, 0],
                                comp.surf_normals[:, 1], comp.surf_normals[:, 2])
                out[j] = float(np.dot(comp.surf_wts, vals) / comp.surf_wts.sum())
        return out


def classify_rows(geom: GridGeometry, merge: MergeResult, bc: BoundaryConditionSpec):
    """Split merged cells into standard-stencil (phi1) and irregular (phi2).

    A cell is regular when it is a lone interior cell and every cross cell
    within two steps is interior, out-of-grid slots being closed by wall
    ghost fills."""
    grid = geom.grid
    phi1, phi2 = [], []
    for mc in merge.cells:
        if mc.is_aggregate or mc.has_cut:
            phi2.append(mc.id)
            continue
        cell = mc.members[0][0]
        regular = True
        for d in range(3):
            for m in (-2, -1, 1, 2):
                j = list(cell)
                j[d] += m
                j = tuple(j)
                if grid.in_bounds(j):
                    if geom.classification[j] != INTERIOR:
                        regular = False
                        break
                else:
                    if bc.wall is None:
                        raise StructuralError(
                            f"cell {cell} stencil leaves the grid but no wall "
                            "boundary condition is configured")
                    # the four inward cells used by the ghost fill must be interior
                    side = 1 if m > 0 else 0
                    b = list(cell)
                    b[d] = grid.extents[d] - 1 if side else 0
                    step = -1 if side else 1
                    for k in range(4):
                        bb = list(b)
                        bb[d] += step * k
                        if geom.classification[tuple(bb)] != INTERIOR:
                            regular = False
                            break
                if not regular:
                    break
            if not regular:
                break
        (phi1 if regular else phi2).append(mc.id)
    return phi1, phi2


def standard_row(cell, h: float) -> dict:
    """13-point cross: per-dimension (-1, 16, -30, 16, -1)/(12 h^2)."""
    coeffs = {}
    for d in range(3):
        for m, s in zip((-2, -1, 0, 1, 2), STENCIL_1D):
            j = list(cell)
            j[d] += m
            j = tuple(j)
            coeffs[j] = coeffs.get(j, 0.0) + s / (h * h)
    return coeffs


def ghost_expansion(grid, cell, d: int, side: int, rank: int, bc_kind: str,
                    h: float):
    """First (rank=1) or second (rank=2) ghost cell past the wall on face
    (d, side), as interior-cell coefficients plus a face-data coefficient."""
    if bc_kind == DIRICHLET:
        coeffs, data = GHOST_DIRICHLET[rank - 1]
        data_scale = data
    elif bc_kind == NEUMANN:
        coeffs, data = GHOST_NEUMANN[rank - 1]
        data_scale = data * h
    else:
        raise StructuralError("walls support Dirichlet or Neumann fills only")
    b = list(cell)
    b[d] = grid.extents[d] - 1 if side else 0
    step = -1 if side else 1
    cells = {}
    for k in range(4):
        bb = list(b)
        bb[d] += step * k
        cells[tuple(bb)] = coeffs[k]
    face_cell = tuple(b)
    return cells, (face_cell, d, side), data_scale


def _resolve_slot(grid, geom, cell, d, m, bc, h):
    """Stencil slot -> (interior-cell coefficients, data terms)."""
    j = list(cell)
    j[d] += m
    j = tuple(j)
    if grid.in_bounds(j):
        return {j: 1.0}, []
    side = 1 if m > 0 else 0
    boundary = grid.extents[d] - 1 if side else 0
    rank = abs(j[d] - boundary)
    cells, key, dscale = ghost_expansion(grid, cell, d, side, rank,
                                         bc.wall.kind, h)
    return cells, [(key, dscale)]


def build_standard_row(geom, merge, cell, bc, h, data_index) -> StencilRow:
    target = merge.merged_of(cell)
    cells = {}
    data = {}
    for d in range(3):
        for m, s in zip((-2, -1, 0, 1, 2), STENCIL_1D):
            sc = s / (h * h)
            cell_coeffs, data_terms = _resolve_slot(geom.grid, geom, cell, d,
                                                    m, bc, h)
            for cc, w in cell_coeffs.items():
                mid = merge.merged_of(cc)
                cells[mid] = cells.get(mid, 0.0) + sc * w
            for key, dscale in data_terms:
                col = data_index.setdefault(("wall",) + key,
                                            len(data_index))
                data[col] = data.get(col, 0.0) + sc * dscale
    return StencilRow(target=target, cells=cells, data=data, order=4)


def build_plg_row(geom, merge, tables: MomentTables, target_mc, bc, n: int,
                  data_index, lattices=None) -> StencilRow:
    """Weighted least-squares row on a poised lattice of merged cells plus
    the boundary patches of every cut cell among them."""
    h = tables.h
    anchor = target_mc.anchor
    lattice, win_anchor = generate_cell_lattice(merge, geom, anchor, n)
    if lattices is not None:
        lattices[target_mc.id] = (lattice, win_anchor)
    center = geom.grid.cell_center(anchor)

    stencil_ids = []
    seen = set()
    for node in lattice.nodes:
        cell = tuple(win_anchor[d] + node[d] for d in range(3))
        mid = merge.merged_of(cell)
        if mid not in seen:
            seen.add(mid)
            stencil_ids.append(mid)
    if len(stencil_ids) != lattice_size(n, 3):
        raise StructuralError(f"lattice for cell {anchor} covers "
                              f"{len(stencil_ids)} distinct merged cells")

    rows = []
    weights = []
    tags = []    # ("cell", mid) or ("patch", cell, comp, data_scale)
    t_centroid = _merged_centroid(geom, merge.cells[target_mc.id])
    for mid in stencil_ids:
        mc = merge.cells[mid]
        m = tables.merged_vol_moments(mc, center)
        rows.append(m / mc.volume)
        dist = np.abs(_merged_centroid(geom, mc) - t_centroid).sum() / h
        weights.append((1.0 + dist) ** (-(n + 1)))
        tags.append(("cell", mid))
        # boundary patches of cut member components
        for (cell, k) in mc.members:
            if geom.classification[cell] != CUT:
                continue
            area, sm, snm = tables.surf_moments(cell, k)
            if area <= 0.0 or sm is None:
                continue
            delta = (tables.cell_center(cell) - center) / h
            R = recenter_matrix(delta, tables.exps)
            comp = geom[cell].components[k]
            w_k = (1.0 + np.abs(comp.centroid - t_centroid).sum() / h) ** (-(n + 1))
            kind = bc.surface.kind
            if kind == DIRICHLET:
                row = (R @ sm) / area
                dscale = 1.0
            elif kind == NEUMANN:
                row = h * (R @ snm) / area
                dscale = h
            else:  # Robin
                row = h * (bc.surface.gamma1 * (R @ sm) +
                           bc.surface.gamma2 * (R @ snm)) / area
                dscale = h
            rows.append(row)
            weights.append(w_k)
            tags.append(("patch", cell, k, dscale))

    A = np.asarray(rows)
    wts = np.asarray(weights)
    target_m = tables.merged_vol_moments(target_mc, center)
    lap = laplacian_map(tables.exps)
    c = (lap.T @ target_m) / (target_mc.volume * h * h)

    W2 = wts
    G = A.T @ (A * W2[:, None])
    try:
        z = np.linalg.solve(G, c)
    except np.linalg.LinAlgError:
        z = np.linalg.lstsq(G, c, rcond=None)[0]
    r = (A * W2[:, None]) @ z

    cells = {}
    data = {}
    for rk, tag in zip(r, tags):
        if tag[0] == "cell":
            cells[tag[1]] = cells.get(tag[1], 0.0) + rk
        else:
            _, cell, k, dscale = tag
            col = data_index.setdefault(("patch", cell, k), len(data_index))
            data[col] = data.get(col, 0.0) + rk * dscale
    return StencilRow(target=target_mc.id, cells=cells, data=data, order=n - 1)


def _merged_centroid(geom, mc):
    acc = np.zeros(3)
    for (cell, k) in mc.members:
        comp = geom[cell].components[k]
        acc += comp.volume * comp.centroid
    return acc / mc.volume


def assemble(geom: GridGeometry, merge: MergeResult,
             bc: BoundaryConditionSpec, n: int = 4,
             keep_lattices: bool = False) -> OperatorBlocks:
    """Build the blocked fourth-order operator for the merged grid."""
    bc.check_solvable()
    h = geom.grid.h
    tables = MomentTables(geom, merge, n)
    phi1_ids, phi2_ids = classify_rows(geom, merge, bc)
    slot_of = {}
    for s, mid in enumerate(phi1_ids):
        slot_of[mid] = s
    for s, mid in enumerate(phi2_ids):
        slot_of[mid] = len(phi1_ids) + s

    data_index = {}
    lattices = {} if keep_lattices else None
    rows = []
    for mid in phi1_ids:
        cell = merge.cells[mid].members[0][0]
        rows.append(build_standard_row(geom, merge, cell, bc, h, data_index))
    for mid in phi2_ids:
        rows.append(build_plg_row(geom, merge, tables, merge.cells[mid], bc,
                                  n, data_index, lattices))

    n1, n2 = len(phi1_ids), len(phi2_ids)
    coo = {"11": ([], [], []), "12": ([], [], []),
           "21": ([], [], []), "22": ([], [], [])}
    ncoo = ([], [], [])
    for row in rows:
        i = slot_of[row.target]
        for mid, w in row.cells.items():
            j = slot_of[mid]
            block = ("1" if i < n1 else "2") + ("1" if j < n1 else "2")
            r, c, v = coo[block]
            r.append(i if i < n1 else i - n1)
            c.append(j if j < n1 else j - n1)
            v.append(w)
        r, c, v = ncoo
        for col, w in row.data.items():
            r.append(i)
            c.append(col)
            v.append(w)

    def mk(block, shape):
        r, c, v = coo[block]
        return SparseMatrix.from_coo(shape, np.asarray(r, dtype=np.int64),
                                     np.asarray(c, dtype=np.int64),
                                     np.asarray(v, dtype=float))

    n_data = len(data_index)
    columns = [None] * n_data
    for key, col in data_index.items():
        if key[0] == "wall":
            columns[col] = DataColumn(kind="wall", key=key[1:],
                                      bc_kind=bc.wall.kind)
        else:
            columns[col] = DataColumn(kind="patch", key=key[1:],
                                      bc_kind=bc.surface.kind)
    r, c, v = ncoo
    N = SparseMatrix.from_coo((n1 + n2, max(n_data, 1)),
                              np.asarray(r, dtype=np.int64),
                              np.asarray(c, dtype=np.int64),
                              np.asarray(v, dtype=float))
    return OperatorBlocks(h=h, phi1_ids=phi1_ids, phi2_ids=phi2_ids,
                          slot_of=slot_of,
                          L11=mk("11", (n1, n1)), L12=mk("12", (n1, n2)),
                          L21=mk("21", (n2, n1)), L22=mk("22", (n2, n2)),
                          N=N, data_columns=columns, merge=merge, geom=geom,
                          lattices=lattices)


def cell_averages(geom: GridGeometry, merge: MergeResult, f, q: int = 6):
    """Averages of a smooth field over every merged cell, assembly order.

    Interior cells use a tensor Gauss rule; cut components use their stored
    cubature rules."""
    grid = geom.grid
    h = grid.h
    gl = gauss_legendre(q)
    nodes = 0.5 * (gl.nodes + 1.0)
    tw = 0.5 * gl.weights
    X, Y, Z = np.meshgrid(nodes, nodes, nodes, indexing="ij")
    W = (tw[:, None, None] * tw[None, :, None] * tw[None, None, :]).ravel()
    ref = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    out = np.zeros(len(merge.cells))
    # batch interior singletons
    interior = [(mc.id, mc.members[0][0]) for mc in merge.cells
                if not mc.has_cut and not mc.is_aggregate]
    if interior:
        los = np.asarray([grid.cell_lo(cell) for _, cell in interior])
        chunk = max(1, 2_000_000 // len(ref))
        for s in range(0, len(interior), chunk):
            sub = los[s:s + chunk]
            pts = sub[:, None, :] + h * ref[None, :, :]
            vals = f(pts[:, :, 0], pts[:, :, 1], pts[:, :, 2])
            avg = vals @ W
            for t, (mid, _) in enumerate(interior[s:s + chunk]):
                out[mid] = avg[t]
    for mc in merge.cells:
        if not mc.has_cut and not mc.is_aggregate:
            continue
        acc = 0.0
        for (cell, k) in mc.members:
            comp = geom[cell].components[k]
            if geom.classification[cell] == INTERIOR:
                lo = grid.cell_lo(cell)
                pts = lo[None, :] + h * ref
                acc += float(np.dot(W, f(pts[:, 0], pts[:, 1], pts[:, 2]))) * h ** 3
            else:
                acc += float(np.dot(comp.vol_wts,
                                    f(comp.vol_pts[:, 0], comp.vol_pts[:, 1],
                                      comp.vol_pts[:, 2])))
        out[mc.id] = acc / mc.volume
    return out
