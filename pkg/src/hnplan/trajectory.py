"""Trajectory encodings: waypoints, first-order differentials, standardization.

A trajectory is a ``(K, 3)`` array of ``(x, y, heading)`` waypoints in the ego
frame at 0.5 s spacing. Its differential form is ``(K, 4)`` rows of
``(dx, dy, sin h, cos h)`` where the first displacement is taken from the ego
origin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateHeading, StandardizationMismatch

K = 8
DT = 0.5
DIFF_DIM = 4 * K
MIN_STD = 1e-6
MIN_HEADING_NORM = 1e-6


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2.0 * np.pi, w)
    return w if np.ndim(w) else float(w)


def validate(traj) -> np.ndarray:
    t = np.asarray(traj, dtype=float)
    if t.shape != (K, 3):
        raise ValueError(f"trajectory must have shape ({K}, 3), got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ValueError("trajectory has non-finite entries")
    return t


@dataclass(frozen=True)
class DiffTrajectory:
    steps: np.ndarray  # (K, 4)
    standardized: bool = False

    def flat(self) -> np.ndarray:
        return self.steps.reshape(-1)


def to_diff_array(trajs) -> np.ndarray:
    """Vectorized differencing over a leading batch shape: (..., K, 3) -> (..., K, 4)."""
    t = np.asarray(trajs, dtype=float)
    xy = t[..., :2]
    prev = np.concatenate([np.zeros_like(xy[..., :1, :]), xy[..., :-1, :]], axis=-2)
    d = xy - prev
    h = t[..., 2]
    return np.concatenate([d, np.sin(h)[..., None], np.cos(h)[..., None]], axis=-1)


def from_diff_array(steps) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized inverse of ``to_diff_array``.

    Returns ``(trajs, degenerate)`` where ``degenerate`` flags items whose
    (sin, cos) pair collapsed below unit-norm tolerance at any step; their
    headings are left at 0 for those steps.
    """
    s = np.asarray(steps, dtype=float)
    xy = np.cumsum(s[..., :2], axis=-2)
    norm = np.hypot(s[..., 2], s[..., 3])
    bad = norm < MIN_HEADING_NORM
    safe = np.where(bad, 1.0, norm)
    h = np.arctan2(s[..., 2] / safe, s[..., 3] / safe)
    h = np.where(bad, 0.0, wrap_angle(h))
    degenerate = bad.any(axis=-1)
    return np.concatenate([xy, h[..., None]], axis=-1), degenerate


def to_diff(traj) -> DiffTrajectory:
    return DiffTrajectory(to_diff_array(validate(traj)))


def from_diff(d: DiffTrajectory | np.ndarray) -> np.ndarray:
    steps = d.steps if isinstance(d, DiffTrajectory) else np.asarray(d, dtype=float)
    if isinstance(d, DiffTrajectory) and d.standardized:
        raise StandardizationMismatch("destandardize before decoding")
    steps = steps.reshape(K, 4)
    if not np.all(np.isfinite(steps)):
        raise ValueError("differential steps must be finite")
    traj, degenerate = from_diff_array(steps)
    if degenerate:
        raise DegenerateHeading("(sin h, cos h) norm below 1e-6")
    return traj


def l2_distance(a, b) -> float:
    """Sum over waypoints of the Euclidean position error (headings ignored)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sum(np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])))


def l2_distance_many(cands, ref) -> np.ndarray:
    """``l2_distance`` of each candidate in an (N, K, 3) stack to ``ref``."""
    c = np.asarray(cands, dtype=float)
    r = np.asarray(ref, dtype=float)
    return np.hypot(c[..., 0] - r[:, 0], c[..., 1] - r[:, 1]).sum(axis=-1)


def l1_diff_distance(a: DiffTrajectory, b: DiffTrajectory) -> float:
    if a.standardized != b.standardized:
        raise StandardizationMismatch("cannot compare standardized with raw differentials")
    return float(np.sum(np.abs(a.flat() - b.flat())))


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray  # (32,)
    std: np.ndarray  # (32,)

    @classmethod
    def fit(cls, trajs) -> "Standardizer":
        flat = to_diff_array(np.asarray(trajs, dtype=float)).reshape(-1, DIFF_DIM)
        if len(flat) == 0:
            raise ValueError("cannot fit a standardizer on an empty set")
        return cls(flat.mean(axis=0), np.maximum(flat.std(axis=0), MIN_STD))

    @classmethod
    def identity(cls) -> "Standardizer":
        return cls(np.zeros(DIFF_DIM), np.ones(DIFF_DIM))

    def standardize(self, flat):
        return (np.asarray(flat, dtype=float) - self.mean) / self.std

    def destandardize(self, flat):
        return np.asarray(flat, dtype=float) * self.std + self.mean

    def encode(self, trajs) -> np.ndarray:
        """Trajectories (..., K, 3) -> standardized flat differentials (..., 32)."""
        t = np.asarray(trajs, dtype=float)
        flat = to_diff_array(t).reshape(t.shape[:-2] + (DIFF_DIM,))
        return self.standardize(flat)

    def decode(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Standardized flat (..., 32) -> (trajectories, degenerate flags)."""
        x = np.asarray(x, dtype=float)
        steps = self.destandardize(x).reshape(x.shape[:-1] + (K, 4))
        return from_diff_array(steps)

    def standardize_diff(self, d: DiffTrajectory) -> DiffTrajectory:
        if d.standardized:
            return d
        return DiffTrajectory(self.standardize(d.flat()).reshape(K, 4), True)

    def destandardize_diff(self, d: DiffTrajectory) -> DiffTrajectory:
        if not d.standardized:
            return d
        return DiffTrajectory(self.destandardize(d.flat()).reshape(K, 4), False)
