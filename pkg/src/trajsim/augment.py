"""Trajectory augmentation operators used to build contrastive views.

All operators are pure: they take a :class:`~trajsim.geo.Trajectory`, a
parameter or two and an explicit ``numpy.random.Generator`` and return a new
trajectory. None of them reorders points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geo import Trajectory

METHODS = ("raw", "shift", "mask", "truncate", "simplify")


class AugmentError(ValueError):
    pass


# rates times lengths like 0.3 * 10 land a hair off integers in binary
def _floor(x: float) -> int:
    return math.floor(round(x, 9))


def _ceil(x: float) -> int:
    return math.ceil(round(x, 9))


@dataclass(frozen=True)
class AugmentConfig:
    method: str = "raw"
    rho_m: float = 100.0
    sigma: float = 0.5
    rho_d: float = 0.3
    rho_b: float = 0.7
    rho_p: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise AugmentError(f"unknown augmentation {self.method!r}; expected one of {METHODS}")
        if not (0 < self.rho_d < 1 and 0 < self.rho_b < 1):
            raise AugmentError("rho_d and rho_b must lie in (0, 1)")
        if not (self.rho_m > 0 and self.rho_p > 0 and self.sigma > 0):
            raise AugmentError("rho_m, rho_p and sigma must be positive")


def bounded_gaussian(rng: np.random.Generator, size, sigma: float = 0.5) -> np.ndarray:
    """Draws from N(0, sigma^2) restricted to [-1, 1] by rejection."""
    out = np.empty(size, dtype=np.float64).ravel()
    filled = 0
    while filled < out.size:
        need = out.size - filled
        draw = rng.normal(0.0, sigma, size=max(16, int(need * 1.2)))
        draw = draw[np.abs(draw) <= 1.0][:need]
        out[filled:filled + len(draw)] = draw
        filled += len(draw)
    return out.reshape(size)


def point_shift(traj: Trajectory, rho_m: float = 100.0, sigma: float = 0.5,
                rng: np.random.Generator | None = None) -> Trajectory:
    """Offset every coordinate by at most ``rho_m`` meters."""
    rng = rng if rng is not None else np.random.default_rng()
    offsets = rho_m * bounded_gaussian(rng, traj.points.shape, sigma)
    return traj.with_points(traj.points + offsets)


def point_mask(traj: Trajectory, rho_d: float = 0.3, rng: np.random.Generator | None = None) -> Trajectory:
    """Keep floor((1 - rho_d) * n) points chosen uniformly, in original order."""
    rng = rng if rng is not None else np.random.default_rng()
    n = len(traj)
    keep = _floor((1.0 - rho_d) * n)
    if keep < 2:
        raise AugmentError(f"masking {n} points at rate {rho_d} leaves {keep} < 2 points")
    idx = np.sort(rng.choice(n, size=keep, replace=False))
    return traj.with_points(traj.points[idx])


def truncate(traj: Trajectory, rho_b: float = 0.7, rng: np.random.Generator | None = None) -> Trajectory:
    """Contiguous slice holding roughly a ``rho_b`` share of the points.

    With 1-based start ``i`` drawn from [1, ceil((1 - rho_b) n)], the slice is
    p_i .. p_j with j = min(floor(i + rho_b n), n).
    """
    rng = rng if rng is not None else np.random.default_rng()
    n = len(traj)
    if _floor(rho_b * n) < 1:
        raise AugmentError(f"truncating {n} points at rate {rho_b} keeps nothing")
    hi = max(1, _ceil((1.0 - rho_b) * n))
    i = int(rng.integers(1, hi + 1))
    j = min(_floor(i + rho_b * n), n)
    return traj.with_points(traj.points[i - 1:j])


def _segment_distances(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance of each row of ``pts`` to segment ab (point distance if a == b)."""
    ab = b - a
    denom = float(ab @ ab)
    ap = pts - a
    if denom == 0.0:
        return np.hypot(ap[:, 0], ap[:, 1])
    t = np.clip(ap @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = pts - proj
    return np.hypot(d[:, 0], d[:, 1])


def dp_keep_indices(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Douglas-Peucker with an explicit stack; returns kept indices ascending."""
    n = len(points)
    if n <= 2:
        return np.arange(n)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _segment_distances(points[lo + 1:hi], points[lo], points[hi])
        k = int(np.argmax(d))
        if d[k] > tolerance:
            mid = lo + 1 + k
            keep[mid] = True
            stack.append((mid, hi))
            stack.append((lo, mid))
    return np.flatnonzero(keep)


def simplify_dp(traj: Trajectory, rho_p: float = 100.0) -> Trajectory:
    return traj.with_points(traj.points[dp_keep_indices(traj.points, rho_p)])


def apply(traj: Trajectory, cfg: AugmentConfig, rng: np.random.Generator) -> Trajectory:
    if cfg.method == "raw":
        return traj
    if cfg.method == "shift":
        return point_shift(traj, cfg.rho_m, cfg.sigma, rng)
    if cfg.method == "mask":
        return point_mask(traj, cfg.rho_d, rng)
    if cfg.method == "truncate":
        return truncate(traj, cfg.rho_b, rng)
    return simplify_dp(traj, cfg.rho_p)


DEFAULT_VIEWS = (AugmentConfig(method="mask"), AugmentConfig(method="truncate"))


def make_views(traj: Trajectory, cfg1: AugmentConfig = DEFAULT_VIEWS[0],
               cfg2: AugmentConfig = DEFAULT_VIEWS[1],
               rng: np.random.Generator | None = None) -> tuple[Trajectory, Trajectory]:
    """Two independently augmented views of ``traj``."""
    rng = rng if rng is not None else np.random.default_rng()
    return apply(traj, cfg1, rng), apply(traj, cfg2, rng)


def with_method(cfg: AugmentConfig, method: str) -> AugmentConfig:
    return replace(cfg, method=method)
