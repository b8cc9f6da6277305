"""Planar geometry: angle wrapping, polylines, oriented boxes and polygons."""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi
BOUNDARY_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Map an angle to the half-open interval (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"non-finite angle: {theta!r}")
    r = theta - TWO_PI * math.ceil((theta - math.pi) / TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    if r > math.pi:
        r = math.pi if r - math.pi < 1e-12 else r - TWO_PI
    return r


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    r = theta - TWO_PI * np.ceil((theta - math.pi) / TWO_PI)
    r = np.where(r <= -math.pi, r + TWO_PI, r)
    return np.where(r > math.pi, math.pi, r)


class Polyline:
    """Arc-length parameterised polyline with straight-line extrapolation past both ends."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least two (x, y) points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("polyline has repeated consecutive points")
        self.points = pts
        self.seg_len = seg_len
        self.dirs = seg / seg_len[:, None]
        self.cum = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.length = float(self.cum[-1])
        self.seg_heading = np.arctan2(self.dirs[:, 1], self.dirs[:, 0])

    def _segment(self, s):
        return np.clip(np.searchsorted(self.cum, s, side="right") - 1, 0, len(self.seg_len) - 1)

    def point_at(self, s):
        s = np.asarray(s, dtype=float)
        i = self._segment(s)
        return self.points[i] + (s - self.cum[i])[..., None] * self.dirs[i]

    def heading_at(self, s):
        return self.seg_heading[self._segment(np.asarray(s, dtype=float))]

    def curvature_at(self, s, ds: float = 2.0):
        s = np.asarray(s, dtype=float)
        h0 = self.heading_at(s - ds)
        h1 = self.heading_at(s + ds)
        return wrap_angles(h1 - h0) / (2.0 * ds)

    def project(self, p):
        """Return (s, d) for point(s) p: arc length of the closest point and signed
        lateral offset (positive to the left of the direction of travel)."""
        p = np.atleast_2d(np.asarray(p, dtype=float))
        a = self.points[:-1]
        rel = p[:, None, :] - a[None, :, :]
        t = np.einsum("nkj,kj->nk", rel, self.dirs)
        n = len(self.seg_len)
        lo = np.zeros(n)
        hi = self.seg_len.copy()
        lo[0] = -np.inf
        hi[-1] = np.inf
        t = np.clip(t, lo, hi)
        foot = a[None] + t[..., None] * self.dirs[None]
        off = p[:, None, :] - foot
        dist = np.hypot(off[..., 0], off[..., 1])
        k = np.argmin(dist, axis=1)
        rows = np.arange(len(p))
        cross = self.dirs[k, 0] * rel[rows, k, 1] - self.dirs[k, 1] * rel[rows, k, 0]
        s = self.cum[k] + t[rows, k]
        d = np.where(cross >= 0, 1.0, -1.0) * dist[rows, k]
        return s, d


def box_corners(x, y, heading, half_length, half_width) -> np.ndarray:
    """Corners of oriented rectangles, shape (..., 4, 2), counterclockwise."""
    x, y, heading, hl, hw = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (x, y, heading, half_length, half_width))
    )
    c, s = np.cos(heading), np.sin(heading)
    lx = np.stack([hl, -hl, -hl, hl], axis=-1)
    ly = np.stack([hw, hw, -hw, -hw], axis=-1)
    cx = x[..., None] + lx * c[..., None] - ly * s[..., None]
    cy = y[..., None] + lx * s[..., None] + ly * c[..., None]
    return np.stack([cx, cy], axis=-1)


def boxes_overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis overlap test for rectangles given as corner arrays (..., 4, 2).

    Inputs broadcast against each other. Touching boxes count as overlapping.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a, b = np.broadcast_arrays(a, b)
    axes = np.concatenate(
        [a[..., 1:3, :] - a[..., 0:2, :], b[..., 1:3, :] - b[..., 0:2, :]], axis=-2
    )
    pa = np.einsum("...cj,...kj->...kc", a, axes)
    pb = np.einsum("...cj,...kj->...kc", b, axes)
    separated = (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return ~separated.any(-1)


def signed_area(poly) -> float:
    p = np.asarray(poly, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _orient(p, q, r):
    return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (
        r[..., 0] - p[..., 0]
    )


def polygon_is_simple(poly) -> bool:
    """True iff no two non-adjacent edges of the closed polygon intersect."""
    p = np.asarray(poly, dtype=float)
    m = len(p)
    if m < 3:
        return False
    a, b = p, np.roll(p, -1, axis=0)
    if np.any(np.all(a == b, axis=1)):
        return False
    i, j = np.triu_indices(m, k=2)
    keep = ~((i == 0) & (j == m - 1))
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return True
    p1, p2, p3, p4 = a[i], b[i], a[j], b[j]
    # bounding-box prefilter keeps this affordable for a few hundred vertices
    bx = (np.maximum(p1[:, 0], p2[:, 0]) >= np.minimum(p3[:, 0], p4[:, 0])) & (
        np.maximum(p3[:, 0], p4[:, 0]) >= np.minimum(p1[:, 0], p2[:, 0])
    )
    by = (np.maximum(p1[:, 1], p2[:, 1]) >= np.minimum(p3[:, 1], p4[:, 1])) & (
        np.maximum(p3[:, 1], p4[:, 1]) >= np.minimum(p1[:, 1], p2[:, 1])
    )
    cand = bx & by
    if not cand.any():
        return True
    p1, p2, p3, p4 = p1[cand], p2[cand], p3[cand], p4[cand]
    d1 = _orient(p3, p4, p1)
    d2 = _orient(p3, p4, p2)
    d3 = _orient(p1, p2, p3)
    d4 = _orient(p1, p2, p4)
    proper = (d1 * d2 < 0) & (d3 * d4 < 0)
    touching = (d1 == 0) | (d2 == 0) | (d3 == 0) | (d4 == 0)
    return not bool(proper.any() or touching.any())


def points_in_polygon(points, poly) -> np.ndarray:
    """Even-odd containment; points on an edge (within 1e-9 m) count as inside."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    p = np.asarray(poly, dtype=float)
    a, b = p, np.roll(p, -1, axis=0)
    ax, ay, bx, by = a[:, 0], a[:, 1], b[:, 0], b[:, 1]
    ex, ey = bx - ax, by - ay

    px, py = pts[:, 0:1], pts[:, 1:2]
    straddle = (ay > py) != (by > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        x_cross = ax + (py - ay) * ex / ey
    inside = (straddle & (px < x_cross)).sum(axis=1) % 2 == 1

    out = np.flatnonzero(~inside)
    if len(out):
        # boundary tie-break only matters for points the crossing test put outside
        px, py = pts[out, 0:1], pts[out, 1:2]
        elen2 = ex * ex + ey * ey
        t = np.clip(((px - ax) * ex + (py - ay) * ey) / elen2, 0.0, 1.0)
        dx = px - (ax + t * ex)
        dy = py - (ay + t * ey)
        inside[out] = (dx * dx + dy * dy <= BOUNDARY_TOL**2).any(axis=1)
    return inside


def offset_polygon(centerline, left_width, right_width) -> np.ndarray:
    """Counterclockwise road polygon built by offsetting a smooth centerline."""
    c = np.asarray(centerline, dtype=float)
    tang = np.gradient(c, axis=0)
    tang /= np.hypot(tang[:, 0], tang[:, 1])[:, None]
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    lw = np.broadcast_to(np.asarray(left_width, dtype=float), (len(c),))
    rw = np.broadcast_to(np.asarray(right_width, dtype=float), (len(c),))
    right = c - normal * rw[:, None]
    left = c + normal * lw[:, None]
    return np.concatenate([right, left[::-1]], axis=0)
