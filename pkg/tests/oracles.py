"""Independent reference integrals for validation tests.

The sphere oracle integrates over the exact sphere/cell intersection using
the exact height profile w = c_w +/- sqrt(r^2 - rho^2); its shadow regions
are bounded by concentric circles, handled exactly by the conic-region
builder.  High quadrature order makes these references accurate to ~1e-12,
far below the geometric errors they are used to measure.
"""

import numpy as np

from ebpoisson.cubature import column_volume_rule
from ebpoisson.region2d import build_region


class SphereCellOracle:
    """Exact-sphere geometry restricted to one cell box."""

    def __init__(self, center, radius, lo, h, q: int = 12):
        self.c = np.asarray(center, dtype=float)
        self.r = float(radius)
        self.lo = np.asarray(lo, dtype=float)
        self.h = float(h)
        self.q = q
        self._build()

    def _build(self):
        c, r, lo, h = self.c, self.r, self.lo, self.h
        mid = lo + 0.5 * h
        normal = (mid - c) / np.linalg.norm(mid - c)
        w_axis = int(np.argmax(np.abs(normal)))
        others = [d for d in range(3) if d != w_axis]
        self.w_axis, self.others = w_axis, others
        self.upper = normal[w_axis] > 0.0         # inside below the sheet
        s = 1.0 if self.upper else -1.0

        # scaled shadow coordinates: rho^2 = (au + u)^2 + (av + v)^2, in h units
        au = (lo[others[0]] - c[others[0]]) / h
        av = (lo[others[1]] - c[others[1]]) / h
        w0 = (lo[w_axis] - c[w_axis]) / h         # cell w-range relative to center
        w1 = w0 + 1.0
        R2 = (r / h) ** 2
        self._au, self._av, self._s, self._R2 = au, av, s, R2

        def circle(bound, sign):
            # sign * (bound - rho^2) >= 0
            return sign * np.array([-1.0, 0.0, -1.0, -2.0 * au, -2.0 * av,
                                    bound - au * au - av * av])

        # guard: the opposite sheet must stay out of the cell w-range
        opp_lo, opp_hi = sorted((-w0, -w1)) if s > 0 else sorted((w0, w1))
        if s > 0 and w0 < 0.0 and R2 - w0 * w0 >= 0.0:
            raise ValueError("opposite sphere sheet enters the cell; oracle invalid")
        if s < 0 and w1 > 0.0 and R2 - w1 * w1 >= 0.0:
            raise ValueError("opposite sphere sheet enters the cell; oracle invalid")

        rect = (0.0, 1.0, 0.0, 1.0)
        cons_patch = [circle(R2, +1.0)]           # sheet exists
        if s > 0:
            # w0 <= c_w + sqrt(R2 - rho2) <= w1   (w measured from center)
            if w0 > 0.0:
                cons_patch.append(circle(R2 - w0 * w0, +1.0))
            if w1 > 0.0:
                cons_patch.append(circle(R2 - w1 * w1, -1.0))
            cons_full = [circle(R2 - w1 * w1, +1.0)] if w1 > 0.0 else [circle(R2, +1.0)]
        else:
            if w1 < 0.0:
                cons_patch.append(circle(R2 - w1 * w1, +1.0))
            if w0 < 0.0:
                cons_patch.append(circle(R2 - w0 * w0, -1.0))
            cons_full = [circle(R2 - w0 * w0, +1.0)] if w0 < 0.0 else [circle(R2, +1.0)]
        self.d_patch = build_region(rect, cons_patch)
        self.d_full = build_region(rect, cons_full)
        self._w0, self._w1 = w0, w1

    # scaled sheet height above the cell floor, in h units within [0, 1]
    def _sheet(self, u, v):
        rho2 = (self._au + u) ** 2 + (self._av + v) ** 2
        root = np.sqrt(np.maximum(self._R2 - rho2, 0.0))
        return np.clip(self._s * root - self._w0, 0.0, 1.0)

    def _metric(self, u, v):
        rho2 = (self._au + u) ** 2 + (self._av + v) ** 2
        return np.sqrt(self._R2 / np.maximum(self._R2 - rho2, 1e-30))

    def volume_rule(self):
        if self.upper:
            pts1, w1 = column_volume_rule(self.d_patch, 0.0, self._sheet, self.q)
        else:
            pts1, w1 = column_volume_rule(self.d_patch, self._sheet, 1.0, self.q)
        pts2, w2 = column_volume_rule(self.d_full, 0.0, 1.0, self.q)
        pts = np.vstack([pts1, pts2])
        wts = np.concatenate([w1, w2]) * self.h ** 3
        out = np.empty_like(pts)
        out[:, self.others[0]] = self.lo[self.others[0]] + self.h * pts[:, 0]
        out[:, self.others[1]] = self.lo[self.others[1]] + self.h * pts[:, 1]
        out[:, self.w_axis] = self.lo[self.w_axis] + self.h * pts[:, 2]
        return out, wts

    def volume(self):
        _, wts = self.volume_rule()
        return float(wts.sum())

    def cell_average(self, f):
        pts, wts = self.volume_rule()
        vol = wts.sum()
        return float(np.dot(wts, f(pts[:, 0], pts[:, 1], pts[:, 2])) / vol)

    def surface_rule(self):
        pts2, w2 = self.d_patch.rule(self.q)
        u, v = pts2[:, 0], pts2[:, 1]
        w = self._sheet(u, v)
        pts = np.empty((len(u), 3))
        pts[:, self.others[0]] = self.lo[self.others[0]] + self.h * u
        pts[:, self.others[1]] = self.lo[self.others[1]] + self.h * v
        pts[:, self.w_axis] = self.lo[self.w_axis] + self.h * w
        return pts, w2 * self._metric(u, v) * self.h ** 2

    def area(self):
        _, wts = self.surface_rule()
        return float(wts.sum())

    def surface_average(self, g):
        pts, wts = self.surface_rule()
        return float(np.dot(wts, g(pts[:, 0], pts[:, 1], pts[:, 2])) / wts.sum())
