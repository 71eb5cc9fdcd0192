"""Poised lattice generation: triangular stencil node sets near the
irregular boundary, found by back-tracking search over a feasibility window.

A triangular lattice of degree n in D dimensions picks n+1 ordered
coordinates per axis and takes the nodes whose coordinate ranks sum to at
most n; any such lattice is poised for complete polynomial interpolation of
degree n.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .errors import NoLatticeFound


def lattice_size(n: int, D: int) -> int:
    return comb(n + D, D)


def _rank_tuples(n: int, D: int):
    """All (k_1..k_D) with sum <= n, graded lexicographic."""
    out = [k for k in itertools.product(range(n + 1), repeat=D)
           if sum(k) <= n]
    out.sort(key=lambda k: (sum(k), k))
    return out


@dataclass(frozen=True)
class TriangularLattice:
    """Node set of a triangular lattice plus its per-axis coordinates."""

    dimension: int
    degree: int
    coords: tuple          # per axis: ordered tuple of n+1 distinct offsets

    @property
    def nodes(self):
        D, n = self.dimension, self.degree
        return tuple(tuple(self.coords[d][k[d]] for d in range(D))
                     for k in _rank_tuples(n, D))

    def __len__(self):
        return lattice_size(self.degree, self.dimension)


@dataclass
class FeasibleSet:
    """Offset window with a membership predicate over merged-cell ids.

    ``cells`` maps each feasible offset (D-tuple within the window) to an
    opaque id; offsets sharing an id count as one stencil member, so a valid
    lattice must cover lattice_size distinct ids.
    """

    base: tuple            # q, the starting offset (must be feasible)
    window: int            # offsets range over {0..window}^D
    cells: dict

    def __post_init__(self):
        self.base = tuple(self.base)
        if self.base not in self.cells:
            raise ValueError("base offset is not feasible")

    def __contains__(self, offset):
        return tuple(offset) in self.cells

    def __len__(self):
        return len(self.cells)


def _axis_candidates(K: FeasibleSet, D: int, n: int):
    """Per axis: offsets that appear in at least one feasible node,
    ordered by distance from the base coordinate (then value)."""
    per_axis = []
    for d in range(D):
        seen = sorted({off[d] for off in K.cells})
        seen.sort(key=lambda c: (abs(c - K.base[d]), c))
        per_axis.append(seen)
    return per_axis


def _slot_schedule(n: int, D: int, cache={}):
    """Assignment order of per-axis coordinate ranks, with the lattice nodes
    that become fully determined at each slot.

    Slots run rank by rank across the axes; after slot (d, r) the nodes with
    k_d = r whose other ranks were assigned earlier become checkable, so the
    search validates every node exactly once and prunes early."""
    key = (n, D)
    got = cache.get(key)
    if got is not None:
        return got
    slots = [(d, r) for r in range(n + 1) for d in range(D)]
    filled = {d: -1 for d in range(D)}
    schedule = []
    for (d, r) in slots:
        filled[d] = r
        fresh = []
        for k in itertools.product(*[range(filled[dd] + 1) for dd in range(D)]):
            if sum(k) <= n and k[d] == r:
                fresh.append(k)
        schedule.append(((d, r), fresh))
    cache[key] = schedule
    return schedule


def generate_lattice(K: FeasibleSet, n: int, D: int = 3) -> TriangularLattice:
    """Back-tracking search for a triangular lattice inside K containing
    the base offset.

    Per-axis coordinates are assigned rank by rank, preferring offsets
    closest to the base; every lattice node is verified (feasible, distinct
    merged id) the moment its ranks are all known, which prunes dead
    branches immediately.
    """
    need = lattice_size(n, D)
    if len(set(K.cells.values())) < need:
        raise NoLatticeFound(f"only {len(set(K.cells.values()))} distinct "
                             f"cells feasible, need {need}")
    cands = _axis_candidates(K, D, n)
    for d in range(D):
        if len(cands[d]) < n + 1:
            raise NoLatticeFound(f"axis {d} offers only {len(cands[d])} coordinates")
    schedule = _slot_schedule(n, D)

    coords = [[None] * (n + 1) for _ in range(D)]
    used = [set() for _ in range(D)]
    used_ids = set()
    rank_of_base = [None] * D

    def place(pos) -> bool:
        if pos == len(schedule):
            return True
        (d, r), fresh = schedule[pos]
        remaining_axis_slots = n - r
        for c in cands[d]:
            if c in used[d]:
                continue
            # the base coordinate must fit a rank budget of n overall
            base_ranks = list(rank_of_base)
            if c == K.base[d]:
                base_ranks[d] = r
            elif rank_of_base[d] is None and remaining_axis_slots == 0:
                continue  # last slot of this axis must take the base coord
            min_total = sum(br if br is not None else r + 1
                            for br in base_ranks)
            if min_total > n:
                continue
            coords[d][r] = c
            used[d].add(c)
            if c == K.base[d]:
                rank_of_base[d] = r
            added = []
            ok = True
            for k in fresh:
                node = tuple(coords[dd][k[dd]] for dd in range(D))
                ident = K.cells.get(node)
                if ident is None or ident in used_ids:
                    ok = False
                    break
                used_ids.add(ident)
                added.append(ident)
            if ok and place(pos + 1):
                return True
            for ident in added:
                used_ids.discard(ident)
            used[d].discard(c)
            coords[d][r] = None
            if c == K.base[d]:
                rank_of_base[d] = None
        return False

    if place(0):
        return TriangularLattice(dimension=D, degree=n,
                                 coords=tuple(tuple(c) for c in coords))
    raise NoLatticeFound("back-tracking search exhausted the window")


def window_feasible_set(merge_result, geom, base_cell, n: int,
                        anchor=None) -> FeasibleSet:
    """Feasibility window around a grid cell, mapping offsets to merged-cell
    ids; exterior and out-of-grid offsets are infeasible."""
    grid = geom.grid
    base_cell = tuple(base_cell)
    if anchor is None:
        anchor = tuple(min(max(base_cell[d] - n // 2, 0),
                           grid.extents[d] - (n + 1)) for d in range(3))
    cells = {}
    for off in itertools.product(range(n + 1), repeat=3):
        cell = tuple(anchor[d] + off[d] for d in range(3))
        if not grid.in_bounds(cell):
            continue
        mid = merge_result.merged_of(cell, 0)
        if mid is None:
            continue
        cells[off] = mid
    base_off = tuple(base_cell[d] - anchor[d] for d in range(3))
    if base_off not in cells:
        raise NoLatticeFound("base cell fell outside its own window")
    return FeasibleSet(base=base_off, window=n, cells=cells)


def generate_cell_lattice(merge_result, geom, base_cell, n: int = 4):
    """Lattice for one target cell, sliding the window inward on failure.

    Slide vectors are tried by increasing L1 length, deterministically.
    Returns (lattice, anchor).
    """
    grid = geom.grid
    base_cell = tuple(base_cell)
    base_anchor = tuple(min(max(base_cell[d] - n // 2, 0),
                            grid.extents[d] - (n + 1)) for d in range(3))
    slides = sorted(itertools.product(range(-n, n + 1), repeat=3),
                    key=lambda s: (sum(map(abs, s)), s))
    last_err = None
    for slide in slides:
        anchor = tuple(base_anchor[d] + slide[d] for d in range(3))
        if any(anchor[d] < 0 or anchor[d] + n >= grid.extents[d]
               for d in range(3)):
            continue
        if any(not anchor[d] <= base_cell[d] <= anchor[d] + n for d in range(3)):
            continue
        try:
            K = window_feasible_set(merge_result, geom, base_cell, n, anchor)
            return generate_lattice(K, n, 3), anchor
        except NoLatticeFound as err:
            last_err = err
            continue
    raise NoLatticeFound(f"no poised lattice near cell {base_cell}: {last_err}")


def verify_poised(lat: TriangularLattice):
    """Condition number of the monomial interpolation matrix at the nodes,
    scaled to the unit box; raises if numerically singular."""
    D, n = lat.dimension, lat.degree
    nodes = np.asarray(lat.nodes, dtype=float)
    span = nodes.max(axis=0) - nodes.min(axis=0)
    span[span == 0.0] = 1.0
    scaled = (nodes - nodes.min(axis=0)) / span
    ranks = _rank_tuples(n, D)
    V = np.empty((len(nodes), len(ranks)))
    for j, expo in enumerate(ranks):
        V[:, j] = np.prod([scaled[:, d] ** expo[d] for d in range(D)], axis=0)
    cond = float(np.linalg.cond(V))
    if not np.isfinite(cond) or 1.0 / cond < 1e-10:
        raise np.linalg.LinAlgError(
            f"interpolation matrix numerically singular (cond={cond:.3e})")
    return cond
