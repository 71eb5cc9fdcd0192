"""Small-cell merging on the component graph.

Vertices are cell components (cell index, component number) of non-exterior
cells; edges connect components sharing a positive-area face.  Merging
first absorbs multi-component cells and small cut cells into their largest
common-face mergeable neighbors, then grows any remaining offender by BFS
until its aggregate clears the volume-fraction threshold.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .cutcell import CUT, EXTERIOR, INTERIOR, GridGeometry
from .errors import StructuralError

_AREA_TOL = 1e-12


class ComponentGraph:
    """Lazy adjacency over cell components with common-face areas."""

    def __init__(self, geom: GridGeometry):
        self.geom = geom
        self.h = geom.grid.h

    def vertices(self):
        out = []
        for idx in self.geom.non_exterior_indices():
            for k in range(len(self.geom[idx].components)):
                out.append((idx, k))
        return sorted(out)

    def _labels(self, idx):
        g = self.geom[idx]
        if g.classification == INTERIOR or g.labels is None:
            return None
        return g.labels

    def _face_overlap_sampled(self, i, ki, j, kj, axis):
        """Common-face area between two components by 8x8 face sampling,
        used when either side is multi-component."""
        h = self.h
        grid = self.geom.grid
        hi_cell = j if j > i else i
        plane = grid.cell_lo(hi_cell)[axis]
        t = (np.arange(8) + 0.5) / 8.0
        o1, o2 = [d for d in range(3) if d != axis]
        A, B = np.meshgrid(t, t, indexing="ij")
        pts = np.empty((3, 64))
        pts[axis] = plane
        pts[o1] = grid.cell_lo(hi_cell)[o1] + h * A.ravel()
        pts[o2] = grid.cell_lo(hi_cell)[o2] + h * B.ravel()
        inside = self.geom.domain.value(pts[0], pts[1], pts[2]) < 0.0

        def comp_at(cell, k_target):
            labels = self._labels(cell)
            if labels is None:
                return np.ones(64, dtype=bool)
            lo_c = grid.cell_lo(cell)
            vox = np.empty((3, 64), dtype=int)
            for d in range(3):
                vox[d] = np.clip(((pts[d] - lo_c[d]) / h * 4).astype(int), 0, 3)
            # sample just inside the cell along the face normal
            vox[axis] = 0 if cell == hi_cell else 3
            lab = labels[vox[0], vox[1], vox[2]]
            if lab.max() == 0:
                return np.ones(64, dtype=bool)
            return lab == (k_target + 1)

        mask = inside & comp_at(i, ki) & comp_at(j, kj)
        return float(mask.sum()) * (h / 8.0) ** 2

    def edge_area(self, vi, vj) -> float:
        """Common-face area between two components of adjacent cells."""
        (i, ki), (j, kj) = (tuple(vi[0]), vi[1]), (tuple(vj[0]), vj[1])
        deltas = [j[d] - i[d] for d in range(3)]
        if sorted(map(abs, deltas)) != [0, 0, 1]:
            return 0.0
        axis = next(d for d in range(3) if deltas[d] != 0)
        gi, gj = self.geom[i], self.geom[j]
        if gi.classification == EXTERIOR or gj.classification == EXTERIOR:
            return 0.0
        multi = len(gi.components) > 1 or len(gj.components) > 1
        if multi:
            return self._face_overlap_sampled(i, ki, j, kj, axis)
        if gi.classification == INTERIOR and gj.classification == INTERIOR:
            return self.h ** 2
        # use the cut side's aperture; lower cell owns the face when both cut
        side_i = 1 if deltas[axis] > 0 else 0
        if gi.classification == CUT:
            return float(gi.apertures[axis, side_i])
        return float(gj.apertures[axis, 1 - side_i])

    def neighbors(self, v):
        """(neighbor, common-face area) pairs, positive areas only."""
        (i, k) = v
        out = []
        for axis in range(3):
            for step in (-1, 1):
                j = (i[0] + step * (axis == 0), i[1] + step * (axis == 1),
                     i[2] + step * (axis == 2))
                if not self.geom.grid.in_bounds(j):
                    continue
                gj = self.geom[j]
                if gj.classification == EXTERIOR:
                    continue
                for kj in range(len(gj.components)):
                    area = self.edge_area((i, k), (j, kj))
                    if area > _AREA_TOL * self.h ** 2:
                        out.append(((j, kj), area))
        out.sort(key=lambda t: t[0])
        return out


def build_component_graph(geom: GridGeometry) -> ComponentGraph:
    return ComponentGraph(geom)


@dataclass
class MergedCell:
    """Aggregate of face-connected cell components acting as one unknown."""

    id: int
    members: list                 # sorted (cell, comp) keys
    volume: float
    anchor: tuple                 # lexicographically smallest member cell
    has_cut: bool
    neighbors: dict = field(default_factory=dict)   # merged id -> area

    @property
    def is_aggregate(self) -> bool:
        return len(self.members) > 1


@dataclass
class MergeResult:
    cells: list
    comp_to_merged: dict
    theta: float
    h: float

    def merged_of(self, cell, comp=0):
        return self.comp_to_merged.get((tuple(cell), comp))

    def __iter__(self):
        return iter(self.cells)

    def __len__(self):
        return len(self.cells)


class _DSU:
    def __init__(self):
        self.parent = {}
        self.volume = {}

    def add(self, key, vol):
        self.parent[key] = key
        self.volume[key] = vol

    def find(self, key):
        root = key
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[key] != root:
            self.parent[key], key = root, self.parent[key]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if rb < ra:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.volume[ra] += self.volume[rb]
        return ra


def merge_cells(geom: GridGeometry, theta: float = 0.25) -> MergeResult:
    """Algorithm: absorb multi-component cells, then small cells, then grow
    any remaining offender by BFS until its aggregate is theta-proper."""
    if not 0.0 < theta < 0.5:
        raise ValueError("theta must lie in (0, 1/2)")
    h = geom.grid.h
    theta_vol = theta * h ** 3
    graph = ComponentGraph(geom)

    cells = geom.non_exterior_indices()
    comp_count = {}
    cell_volume = {}
    for idx in cells:
        g = geom[idx]
        comp_count[idx] = len(g.components)
        cell_volume[idx] = g.volume
    if cells and all(comp_count[i] > 1 for i in cells):
        raise StructuralError("no single-component cell exists; cannot merge")

    def is_multi(idx):
        return comp_count[idx] > 1

    def theta_proper(idx):
        return not is_multi(idx) and cell_volume[idx] >= theta_vol

    dsu = _DSU()
    for idx in cells:
        g = geom[idx]
        for k, comp in enumerate(g.components):
            dsu.add((idx, k), comp.volume)

    def mergeable(i, j) -> bool:
        mi, mj = is_multi(i), is_multi(j)
        if not mi and not mj:
            return theta_proper(i) or theta_proper(j)
        if mi != mj:
            return theta_proper(j) if mi else theta_proper(i)
        return False

    def best_neighbor(key, want):
        """Largest-common-face neighbor cell satisfying the predicate;
        ties break toward the lowest cell index."""
        best = None
        for (nb, area) in graph.neighbors(key):
            j = nb[0]
            if not want(j):
                continue
            if best is None or area > best[0] + _AREA_TOL * h * h or \
                    (abs(area - best[0]) <= _AREA_TOL * h * h and nb < best[1]):
                best = (area, nb)
        return best

    merged_multi = set()
    # multi-component cells first: each component joins its largest-face
    # mergeable neighbor
    for idx in cells:
        if not is_multi(idx):
            continue
        for k in range(comp_count[idx]):
            pick = best_neighbor((idx, k), lambda j: mergeable(idx, j))
            if pick is not None:
                dsu.union(pick[1], (idx, k))
                merged_multi.add((idx, k))

    # small single-component cut cells
    for idx in cells:
        g = geom[idx]
        if g.classification != CUT or is_multi(idx):
            continue
        if cell_volume[idx] >= theta_vol:
            continue
        pick = best_neighbor((idx, 0), lambda j: mergeable(idx, j))
        if pick is not None:
            dsu.union(pick[1], (idx, 0))

    # BFS sweep for whatever is still deficient
    for idx in cells:
        for k in range(comp_count[idx]):
            key = (idx, k)
            root = dsu.find(key)
            deficient = dsu.volume[root] < theta_vol
            unmerged_multi = is_multi(idx) and key not in merged_multi and \
                dsu.volume[root] <= geom[idx].components[k].volume * (1 + 1e-12)
            if not deficient and not unmerged_multi:
                continue
            seen = {key}
            queue = deque([key])
            while queue and (dsu.volume[dsu.find(key)] < theta_vol or
                             dsu.find(key) == key and unmerged_multi):
                cur = queue.popleft()
                for (nb, _area) in graph.neighbors(cur):
                    if nb in seen:
                        continue
                    seen.add(nb)
                    queue.append(nb)
                    if dsu.find(nb) != dsu.find(key):
                        dsu.union(nb, key)
                        unmerged_multi = False
                    if dsu.volume[dsu.find(key)] >= theta_vol:
                        break
            if dsu.volume[dsu.find(key)] < theta_vol:
                raise StructuralError(
                    f"component graph exhausted while growing {key}; "
                    "domain appears disconnected")

    groups = {}
    for idx in cells:
        for k in range(comp_count[idx]):
            groups.setdefault(dsu.find((idx, k)), []).append((idx, k))
    ordered = sorted(groups.values(), key=lambda m: min(m))
    merged_cells = []
    comp_to_merged = {}
    for mid, members in enumerate(ordered):
        members.sort()
        has_cut = any(geom.classification[m[0]] == CUT for m in members)
        vol = sum(geom[m[0]].components[m[1]].volume for m in members)
        mc = MergedCell(id=mid, members=members, volume=vol,
                        anchor=min(m[0] for m in members), has_cut=has_cut)
        merged_cells.append(mc)
        for m in members:
            comp_to_merged[m] = mid

    # common-face areas between merged cells, for aggregates and their
    # neighborhoods only (interior singletons stay lazy)
    interesting = [mc for mc in merged_cells if mc.has_cut or mc.is_aggregate]
    for mc in interesting:
        for m in mc.members:
            for (nb, area) in graph.neighbors(m):
                other = comp_to_merged[nb]
                if other != mc.id:
                    mc.neighbors[other] = mc.neighbors.get(other, 0.0) + area
    return MergeResult(cells=merged_cells, comp_to_merged=comp_to_merged,
                       theta=theta, h=h)
