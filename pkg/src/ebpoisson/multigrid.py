"""Geometric multigrid with an exact LU correction of the irregular block.

Each smoothing step is a weighted Jacobi sweep on the regular block
followed by a direct solve of the irregular block with its precomputed
nested-dissection LU, which zeroes the irregular residual exactly.
Transfers are volume-weighted averaging down and piecewise-constant
injection up, touching regular unknowns only.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse as _sp

from .cutcell import GridSpec, GridGeometry, classify_and_build
from .discretize import OperatorBlocks, assemble
from .errors import DivergenceError, StructuralError
from .merging import merge_cells
from .sparse import Graph, Permutation, adjacency_graph, lu_factor, lu_solve, nd_order


@dataclass
class MultigridParams:
    omega: float = 0.5
    nu1: int = 3
    nu2: int = 3
    i_max: int = 100
    eps: float = 1e-10
    i_vcycle: int = 3
    bottom_max_cells: int = 4096

    def __post_init__(self):
        if not 0.0 < self.omega < 1.0:
            raise ValueError("omega must lie in (0, 1)")
        if self.nu1 < 1 or self.nu2 < 1:
            raise ValueError("smoothing counts must be at least 1")


@dataclass
class GridLevel:
    m: int
    grid: GridSpec
    geom: GridGeometry
    merge: object
    op: OperatorBlocks
    diag1: np.ndarray = None
    perm22: Permutation = None
    lu22: object = None
    perm_full: Permutation = None
    lu_full: object = None
    restrict_mat: object = None     # from this (fine) level to the next
    prolong_mat: object = None

    def prepare_smoother(self):
        d = self.op.L11.to_scipy().diagonal()
        if self.op.n1 and np.any(d == 0.0):
            raise StructuralError(f"zero diagonal in L11 at level {self.m}")
        self.diag1 = d


def _anchor_coords(op: OperatorBlocks, ids):
    return np.asarray([op.merge.cells[mid].anchor for mid in ids], dtype=np.int64)


def _nd_perm_for(A, coords, stencil_width=4):
    G = adjacency_graph(A, coords=coords)
    return nd_order(G, stencil_width=stencil_width)


class Hierarchy:
    """Grid hierarchy with per-level operators and factorizations."""

    def __init__(self, domain, grid: GridSpec, bc, theta: float = 0.25,
                 degree: int = 4, params: MultigridParams = None,
                 geometry_kwargs: dict = None):
        self.params = params or MultigridParams()
        self.bc = bc
        self.domain = domain
        self.timings = {}
        gkw = geometry_kwargs or {}

        t0 = time.perf_counter()
        grids = [grid]
        while True:
            g = grids[-1]
            if g.n_cells <= self.params.bottom_max_cells:
                break
            if any(e % 2 for e in g.extents) or any(e // 2 < 4 for e in g.extents):
                break
            grids.append(GridSpec(origin=g.origin, h=2.0 * g.h,
                                  extents=tuple(e // 2 for e in g.extents)))

        self.levels = []
        for m, g in enumerate(grids):
            geom = classify_and_build(domain, g, **gkw)
            merge = merge_cells(geom, theta)
            op = assemble(geom, merge, bc, n=degree)
            level = GridLevel(m=m, grid=g, geom=geom, merge=merge, op=op)
            level.prepare_smoother()
            self.levels.append(level)
        self.timings["setup_operators"] = time.perf_counter() - t0

        # LU-correction factorizations for every level above the bottom
        t0 = time.perf_counter()
        for level in self.levels[:-1]:
            self._factor_l22(level)
        # the bottom level gets a direct solver for its full operator
        self.timings["setup_lu_correction"] = time.perf_counter() - t0
        t0 = time.perf_counter()
        bottom = self.levels[-1]
        A = bottom.op.full_matrix()
        ids = bottom.op.phi1_ids + bottom.op.phi2_ids
        bottom.perm_full = _nd_perm_for(A, _anchor_coords(bottom.op, ids))
        bottom.lu_full = lu_factor(A, bottom.perm_full)
        if len(self.levels) > 1:
            self._factor_l22(bottom)
        self.timings["setup_bottom"] = time.perf_counter() - t0

        for fine, coarse in zip(self.levels[:-1], self.levels[1:]):
            fine.restrict_mat, fine.prolong_mat = _transfers(fine, coarse)

    def _factor_l22(self, level):
        if level.op.n2 == 0:
            return
        coords = _anchor_coords(level.op, level.op.phi2_ids)
        level.perm22 = _nd_perm_for(level.op.L22, coords)
        level.lu22 = lu_factor(level.op.L22, level.perm22)

    # --- smoother stages ---------------------------------------------------

    def smooth(self, level: GridLevel, phi, rhs):
        """Weighted Jacobi on the regular block; irregular block untouched."""
        op = level.op
        n1 = op.n1
        if n1 == 0:
            return phi
        omega = self.params.omega
        r1 = rhs[:n1] - op.L11.matvec(phi[:n1])
        if op.n2:
            r1 -= op.L12.matvec(phi[n1:])
        phi = phi.copy()
        phi[:n1] += omega * r1 / level.diag1
        return phi

    def lu_correct(self, level: GridLevel, phi, rhs):
        """Solve the irregular block exactly with the precomputed LU."""
        op = level.op
        n1 = op.n1
        if op.n2 == 0 or level.lu22 is None:
            return phi
        rhs2 = rhs[n1:] - op.L21.matvec(phi[:n1])
        phi = phi.copy()
        phi[n1:] = lu_solve(level.lu22, level.perm22, rhs2)
        return phi

    def _smooth_pair(self, level, phi, rhs, count):
        for _ in range(count):
            phi = self.smooth(level, phi, rhs)
            phi = self.lu_correct(level, phi, rhs)
        return phi

    # --- transfers ----------------------------------------------------------

    def restrict(self, level_m: int, fine_values):
        return self.levels[level_m].restrict_mat @ fine_values

    def prolong(self, level_m: int, coarse_values):
        return self.levels[level_m].prolong_mat @ coarse_values

    # --- cycles --------------------------------------------------------------

    def v_cycle(self, m: int, s):
        level = self.levels[m]
        if m == len(self.levels) - 1:
            return lu_solve(level.lu_full, level.perm_full, s)
        phi = np.zeros_like(s)
        phi = self._smooth_pair(level, phi, s, self.params.nu1)
        s_next = self.restrict(m, s - level.op.apply(phi))
        e_coarse = self.v_cycle(m + 1, s_next)
        phi = phi + self.prolong(m, e_coarse)
        phi = self._smooth_pair(level, phi, s, self.params.nu2)
        return phi

    def solve(self, rhs, guess=None, params: MultigridParams = None,
              collect=None):
        """Top-level iteration: V-cycles until the relative residual drops
        below eps or i_max cycles elapse.  Returns (phi, history)."""
        p = params or self.params
        level = self.levels[0]
        phi = np.zeros_like(rhs) if guess is None else guess.copy()
        norm_r = np.linalg.norm(rhs)
        if norm_r == 0.0:
            return phi, [0.0]
        history = []
        grow = 0
        for it in range(p.i_max):
            s = rhs - level.op.apply(phi)
            rel = np.linalg.norm(s) / norm_r
            history.append(rel)
            if collect is not None:
                collect(it, rel)
            if rel < p.eps:
                break
            if len(history) >= 2 and history[-1] > history[-2]:
                grow += 1
                if grow >= 3:
                    raise DivergenceError(
                        f"relative residual grew for 3 consecutive cycles "
                        f"(last {history[-3:]})")
            else:
                grow = 0
            phi = phi + self.v_cycle(0, s)
        else:
            s = rhs - level.op.apply(phi)
            history.append(np.linalg.norm(s) / norm_r)
        return phi, history

    def fmg(self, rhs, params: MultigridParams = None):
        """Full multigrid: coarse-to-fine sweep with a fixed number of
        V-cycles per level."""
        p = params or self.params

        def descend(m, s):
            level = self.levels[m]
            if m == len(self.levels) - 1:
                return lu_solve(level.lu_full, level.perm_full, s)
            s_next = self.restrict(m, s)
            phi_c = descend(m + 1, s_next)
            phi = self.prolong(m, phi_c)
            for _ in range(p.i_vcycle):
                phi = phi + self.v_cycle(m, s - level.op.apply(phi))
            return phi

        return descend(0, rhs)


def _transfers(fine: GridLevel, coarse: GridLevel):
    """Volume-weighted restriction and patch-wise constant prolongation.

    Only regular (phi1) unknowns take part; irregular entries stay zero on
    both ends, and a fine regular cell under an irregular coarse parent
    receives no correction."""
    rows_r, cols_r, vals_r = [], [], []
    rows_p, cols_p, vals_p = [], [], []
    n_f = fine.op.n
    n_c = coarse.op.n
    fine_slot = fine.op.slot_of
    fine_merge = fine.merge
    coarse_slot = coarse.op.slot_of
    coarse_merge = coarse.merge

    for s_c, mid_c in enumerate(coarse.op.phi1_ids):
        cc = coarse_merge.cells[mid_c].members[0][0]
        for off in np.ndindex(2, 2, 2):
            child = (2 * cc[0] + off[0], 2 * cc[1] + off[1], 2 * cc[2] + off[2])
            mid_f = fine_merge.merged_of(child)
            if mid_f is None:
                continue
            rows_r.append(s_c)
            cols_r.append(fine_slot[mid_f])
            vals_r.append(0.125)

    for s_f, mid_f in enumerate(fine.op.phi1_ids):
        fc = fine_merge.cells[mid_f].members[0][0]
        parent = (fc[0] // 2, fc[1] // 2, fc[2] // 2)
        mid_c = coarse_merge.merged_of(parent)
        if mid_c is None:
            continue
        sc = coarse_slot[mid_c]
        if sc >= coarse.op.n1:
            continue  # irregular parent: no correction injected
        rows_p.append(s_f)
        cols_p.append(sc)
        vals_p.append(1.0)

    R = _sp.coo_matrix((vals_r, (rows_r, cols_r)), shape=(n_c, n_f)).tocsr()
    P = _sp.coo_matrix((vals_p, (rows_p, cols_p)), shape=(n_f, n_c)).tocsr()
    return R, P
