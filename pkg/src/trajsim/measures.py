"""Heuristic trajectory distances: Hausdorff, discrete Frechet and EDR.

Inputs are (n, 2) arrays of projected meters or :class:`Trajectory`
objects. The dynamic programs are compiled with numba.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .geo import Trajectory

KINDS = ("hausdorff", "frechet_discrete", "edr")


@dataclass(frozen=True)
class MeasureKind:
    name: str = "hausdorff"
    edr_epsilon: float = 100.0
    point_to_point: bool = False

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown measure {self.name!r}; expected one of {KINDS}")
        if not self.edr_epsilon > 0:
            raise ValueError("edr_epsilon must be positive")


def _pts(t) -> np.ndarray:
    p = t.points if isinstance(t, Trajectory) else np.asarray(t, dtype=np.float64).reshape(-1, 2)
    if len(p) == 0:
        raise ValueError("empty trajectory")
    return np.ascontiguousarray(p, dtype=np.float64)


@njit(cache=True)
def _directed_polyline(a, b):
    # max over points of a of the distance to the polyline through b
    best_max = 0.0
    m = b.shape[0]
    for i in range(a.shape[0]):
        px, py = a[i, 0], a[i, 1]
        best = np.inf
        if m == 1:
            best = np.hypot(px - b[0, 0], py - b[0, 1])
        for j in range(m - 1):
            ax, ay = b[j, 0], b[j, 1]
            dx, dy = b[j + 1, 0] - ax, b[j + 1, 1] - ay
            den = dx * dx + dy * dy
            t = 0.0
            if den > 0.0:
                t = ((px - ax) * dx + (py - ay) * dy) / den
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            d = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
            if d < best:
                best = d
        if best > best_max:
            best_max = best
    return best_max


@njit(cache=True)
def _directed_points(a, b):
    best_max = 0.0
    for i in range(a.shape[0]):
        best = np.inf
        for j in range(b.shape[0]):
            d = np.hypot(a[i, 0] - b[j, 0], a[i, 1] - b[j, 1])
            if d < best:
                best = d
        if best > best_max:
            best_max = best
    return best_max


def hausdorff(t1, t2, point_to_point: bool = False) -> float:
    """Symmetric Hausdorff distance in meters.

    By default each point is measured against the other trajectory's
    polyline; ``point_to_point`` compares vertices only.
    """
    a, b = _pts(t1), _pts(t2)
    f = _directed_points if point_to_point else _directed_polyline
    return float(max(f(a, b), f(b, a)))


@njit(cache=True)
def _frechet(a, b):
    n, m = a.shape[0], b.shape[0]
    ca = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            d = np.hypot(a[i, 0] - b[j, 0], a[i, 1] - b[j, 1])
            if i == 0 and j == 0:
                ca[i, j] = d
            elif i == 0:
                ca[i, j] = max(ca[i, j - 1], d)
            elif j == 0:
                ca[i, j] = max(ca[i - 1, j], d)
            else:
                ca[i, j] = max(min(ca[i - 1, j], ca[i - 1, j - 1], ca[i, j - 1]), d)
    return ca[n - 1, m - 1]


def frechet_discrete(t1, t2) -> float:
    """Discrete Frechet distance (coupling DP over the n x m table)."""
    return float(_frechet(_pts(t1), _pts(t2)))


@njit(cache=True)
def _edr(a, b, eps):
    n, m = a.shape[0], b.shape[0]
    prev = np.arange(m + 1).astype(np.float64)
    cur = np.empty(m + 1)
    for i in range(1, n + 1):
        cur[0] = i
        for j in range(1, m + 1):
            sub = 0.0
            if abs(a[i - 1, 0] - b[j - 1, 0]) > eps or abs(a[i - 1, 1] - b[j - 1, 1]) > eps:
                sub = 1.0
            cur[j] = min(prev[j - 1] + sub, prev[j] + 1.0, cur[j - 1] + 1.0)
        prev, cur = cur, prev
    return prev[m]


def edr(t1, t2, epsilon: float = 100.0) -> float:
    """Edit Distance on Real sequence: unit insert/delete, match when both axes within ``epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return float(_edr(_pts(t1), _pts(t2), float(epsilon)))


def measure(t1, t2, kind: MeasureKind | str = "hausdorff") -> float:
    kind = MeasureKind(kind) if isinstance(kind, str) else kind
    if kind.name == "hausdorff":
        return hausdorff(t1, t2, kind.point_to_point)
    if kind.name == "frechet_discrete":
        return frechet_discrete(t1, t2)
    return edr(t1, t2, kind.edr_epsilon)


def pairwise_matrix(trajs_a, trajs_b, kind: MeasureKind | str = "hausdorff") -> np.ndarray:
    """Entry (i, j) is ``measure(trajs_a[i], trajs_b[j])``."""
    if len(trajs_a) == 0 or len(trajs_b) == 0:
        raise ValueError("pairwise_matrix needs non-empty inputs")
    kind = MeasureKind(kind) if isinstance(kind, str) else kind
    a = [_pts(t) for t in trajs_a]
    b = [_pts(t) for t in trajs_b]
    out = np.empty((len(a), len(b)))
    for i, p in enumerate(a):
        for j, q in enumerate(b):
            out[i, j] = measure(p, q, kind)
    return out
