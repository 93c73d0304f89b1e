"""Planar geometry: oriented rectangles and polyline (Frenet) projection."""
from __future__ import annotations

import numpy as np


def rect_corners(cx, cy, h, half_len, half_wid) -> np.ndarray:
    """Corners of oriented rectangles, shape (..., 4, 2), counter-clockwise."""
    cx, cy, h = np.broadcast_arrays(np.asarray(cx, float), np.asarray(cy, float), np.asarray(h, float))
    c, s = np.cos(h), np.sin(h)
    sl = np.array([1.0, -1.0, -1.0, 1.0]) * half_len
    sw = np.array([1.0, 1.0, -1.0, -1.0]) * half_wid
    x = cx[..., None] + c[..., None] * sl - s[..., None] * sw
    y = cy[..., None] + s[..., None] * sl + c[..., None] * sw
    return np.stack([x, y], axis=-1)


def rects_overlap(c1x, c1y, h1, hl1, hw1, c2x, c2y, h2, hl2, hw2) -> np.ndarray:
    """Separating-axis test for two oriented rectangles, broadcast over inputs.

    Touching rectangles do not count as overlapping.
    """
    dx = np.asarray(c2x, float) - c1x
    dy = np.asarray(c2y, float) - c1y
    u1 = (np.cos(h1), np.sin(h1))
    v1 = (-u1[1], u1[0])
    u2 = (np.cos(h2), np.sin(h2))
    v2 = (-u2[1], u2[0])
    result = None
    for ax in (u1, v1, u2, v2):
        proj = np.abs(dx * ax[0] + dy * ax[1])
        r1 = hl1 * np.abs(u1[0] * ax[0] + u1[1] * ax[1]) + hw1 * np.abs(v1[0] * ax[0] + v1[1] * ax[1])
        r2 = hl2 * np.abs(u2[0] * ax[0] + u2[1] * ax[1]) + hw2 * np.abs(v2[0] * ax[0] + v2[1] * ax[1])
        sep_ok = proj < r1 + r2
        result = sep_ok if result is None else (result & sep_ok)
    return result


class Polyline:
    """Piecewise-linear path with arc-length parameterization.

    Queries beyond either end extrapolate along the end tangent.
    """

    def __init__(self, points):
        p = np.asarray(points, dtype=float)
        if p.ndim != 2 or p.shape[1] != 2 or len(p) < 2:
            raise ValueError("polyline needs at least two 2D points")
        seg = np.diff(p, axis=0)
        length = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(length <= 0):
            raise ValueError("polyline points must be distinct")
        self.points = p
        self.seg_len = length
        self.tangent = seg / length[:, None]
        self.normal = np.stack([-self.tangent[:, 1], self.tangent[:, 0]], axis=1)
        self.s = np.concatenate([[0.0], np.cumsum(length)])
        self.length = float(self.s[-1])
        seg_h = np.arctan2(self.tangent[:, 1], self.tangent[:, 0])
        # vertex headings: end tangents at the ends, unwrapped midpoint elsewhere
        unwrapped = np.unwrap(seg_h)
        mid = 0.5 * (unwrapped[:-1] + unwrapped[1:])
        self.vertex_heading = np.concatenate([[unwrapped[0]], mid, [unwrapped[-1]]])

    def project(self, pts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project points (..., 2) onto the polyline.

        Returns ``(s, d, beyond)``: arc length of the foot point, signed lateral
        offset (left positive) and a flag for feet falling past either end.
        """
        q = np.asarray(pts, dtype=float)
        shape = q.shape[:-1]
        q = q.reshape(-1, 2)
        a = self.points[:-1]
        rel = q[:, None, :] - a[None, :, :]  # (P, S, 2)
        along = rel[..., 0] * self.tangent[:, 0] + rel[..., 1] * self.tangent[:, 1]
        across = rel[..., 0] * self.normal[:, 0] + rel[..., 1] * self.normal[:, 1]
        u = np.clip(along, 0.0, self.seg_len)
        dist2 = (along - u) ** 2 + across ** 2
        j = np.argmin(dist2, axis=1)
        idx = np.arange(len(q))
        al = along[idx, j]
        ac = across[idx, j]
        last = len(self.seg_len) - 1
        lo = (j == 0) & (al < 0)
        hi = (j == last) & (al > self.seg_len[j])
        inner = ~(lo | hi)
        uj = np.where(inner, np.clip(al, 0.0, self.seg_len[j]), al)
        s = self.s[j] + uj
        dist = np.sqrt(dist2[idx, j])
        d = np.where(inner, np.sign(ac) * dist, ac)
        # exactly on a vertex with zero across: sign(0) -> 0, which is right
        beyond = lo | hi
        return s.reshape(shape), d.reshape(shape), beyond.reshape(shape)

    def frenet_to_xy(self, s, d=0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cartesian pose ``(x, y, heading)`` at arc length ``s`` and lateral offset ``d``."""
        s, d = np.broadcast_arrays(np.asarray(s, float), np.asarray(d, float))
        j = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.seg_len) - 1)
        ds = s - self.s[j]
        base = self.points[j] + self.tangent[j] * ds[..., None]
        inside = (s >= 0) & (s <= self.length)
        frac = np.clip(ds / self.seg_len[j], 0.0, 1.0)
        h_in = self.vertex_heading[j] * (1 - frac) + self.vertex_heading[j + 1] * frac
        h_out = np.arctan2(self.tangent[j, 1], self.tangent[j, 0])
        h = np.where(inside, h_in, h_out)
        # offset along the interpolated normal so offset tracks stay continuous at vertices
        normal = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        xy = base + normal * d[..., None]
        return xy[..., 0], xy[..., 1], h

    def heading_at(self, s) -> np.ndarray:
        return self.frenet_to_xy(s, 0.0)[2]

    def offset(self, d: float) -> np.ndarray:
        """Mitered offset curve at lateral distance ``d`` through the vertices."""
        n_v = np.empty_like(self.points)
        n_v[0] = self.normal[0]
        n_v[-1] = self.normal[-1]
        bis = self.normal[:-1] + self.normal[1:]
        bis /= np.hypot(bis[:, 0], bis[:, 1])[:, None]
        cos_half = np.sum(bis * self.normal[1:], axis=1)
        n_v[1:-1] = bis / cos_half[:, None]
        return self.points + d * n_v
