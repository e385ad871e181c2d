"""Evaluation protocols and ranking metrics.

* odd/even query-database construction for self-similarity search
* down-sampling and distortion of trajectories for robustness sweeps
* mean rank of the ground truth, HR@k and Ra@b
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .augment import bounded_gaussian
from .geo import Trajectory


class EvalError(ValueError):
    pass


@dataclass
class QueryDB:
    queries: list[Trajectory]
    database: list[Trajectory]
    truth: dict[str, str]


def odd_even_split(traj: Trajectory) -> tuple[Trajectory, Trajectory]:
    """Points 1, 3, 5, ... and points 2, 4, 6, ... (1-based)."""
    return (Trajectory(f"{traj.id}#a", traj.points[0::2]),
            Trajectory(f"{traj.id}#b", traj.points[1::2]))


def make_query_db(trajs: Sequence[Trajectory], n_queries: int, db_size: int,
                  rng: np.random.Generator | None = None) -> QueryDB:
    """Odd halves become queries; even halves seed the database, which is
    padded with other whole trajectories up to ``db_size``."""
    rng = rng if rng is not None else np.random.default_rng()
    if n_queries < 1 or db_size < n_queries:
        raise EvalError("need 1 <= n_queries <= db_size")
    if len(trajs) < db_size:
        raise EvalError(f"pool of {len(trajs)} trajectories cannot fill a database of {db_size}")
    order = rng.permutation(len(trajs))
    picked = [trajs[i] for i in order[:n_queries]]
    if any(len(t) < 4 for t in picked):
        raise EvalError("query trajectories need at least 4 points")
    queries, database, truth = [], [], {}
    for t in picked:
        a, b = odd_even_split(t)
        queries.append(a)
        database.append(b)
        truth[a.id] = b.id
    database.extend(trajs[i] for i in order[n_queries:db_size])
    if len({t.id for t in database}) != len(database):
        raise EvalError("database ids are not unique")
    return QueryDB(queries, database, truth)


def downsample(traj: Trajectory, rho_s: float, rng: np.random.Generator) -> Trajectory:
    """Drop each interior point independently with probability ``rho_s``."""
    if not 0.0 <= rho_s < 1.0:
        raise EvalError("rho_s must be in [0, 1)")
    n = len(traj)
    keep = rng.random(n) >= rho_s
    keep[0] = keep[-1] = True
    if keep.sum() < 2:
        raise EvalError("down-sampling left fewer than two points")
    return traj.with_points(traj.points[keep])


def distort(traj: Trajectory, rho_d: float, rng: np.random.Generator,
            rho_m: float = 100.0, sigma: float = 0.5) -> Trajectory:
    """Shift a uniformly chosen ceil(rho_d * n) subset of points by bounded noise."""
    if not 0.0 <= rho_d < 1.0:
        raise EvalError("rho_d must be in [0, 1)")
    n = len(traj)
    k = math.ceil(round(rho_d * n, 9))
    if k == 0:
        return traj
    idx = rng.choice(n, size=k, replace=False)
    pts = traj.points.copy()
    pts[idx] += rho_m * bounded_gaussian(rng, (k, 2), sigma)
    return traj.with_points(pts)


def perturb_query_db(qdb: QueryDB, kind: str, rho: float, rng: np.random.Generator) -> QueryDB:
    """Apply ``downsample`` or ``distort`` to every query and database trajectory."""
    fn = {"downsample": downsample, "distort": distort}.get(kind)
    if fn is None:
        raise EvalError(f"unknown perturbation {kind!r}")
    return QueryDB([fn(t, rho, rng) for t in qdb.queries],
                   [fn(t, rho, rng) for t in qdb.database], dict(qdb.truth))


# ---------------------------------------------------------------- ranking


def l1_matrix(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    for i in range(0, len(a), chunk):
        out[i:i + chunk] = np.abs(a[i:i + chunk, None, :] - b[None, :, :]).sum(-1)
    return out


def truth_ranks(dist: np.ndarray, q_ids: Sequence[str], d_ids: Sequence[str],
                truth: Mapping[str, str]) -> np.ndarray:
    """1-based rank of each query's ground truth by ascending distance (ties by id)."""
    col = {d: j for j, d in enumerate(d_ids)}
    d_ids_arr = np.array(d_ids)
    ranks = np.empty(len(q_ids), dtype=np.int64)
    for i, q in enumerate(q_ids):
        try:
            j = col[truth[q]]
        except KeyError:
            raise EvalError(f"ground truth of {q!r} is not in the database") from None
        row = dist[i]
        dt = row[j]
        ranks[i] = 1 + int((row < dt).sum()) + int(((row == dt) & (d_ids_arr < d_ids_arr[j])).sum())
    return ranks


def mean_rank_from_embeddings(q_emb: np.ndarray, q_ids: Sequence[str], d_emb: np.ndarray,
                              d_ids: Sequence[str], truth: Mapping[str, str]) -> float:
    return float(truth_ranks(l1_matrix(q_emb, d_emb), q_ids, d_ids, truth).mean())


def mean_rank(encoder, qdb: QueryDB) -> float:
    """Embed queries and database with ``encoder`` and average the truth ranks."""
    q = encoder.embed(qdb.queries)
    d = encoder.embed(qdb.database)
    return mean_rank_from_embeddings(q, [t.id for t in qdb.queries], d, [t.id for t in qdb.database], qdb.truth)


def hr_at_k(pred_ranking: Sequence, true_ranking: Sequence, k: int) -> float:
    """Share of the true top-k found in the predicted top-k."""
    if k < 1 or k > len(true_ranking) or k > len(pred_ranking):
        raise EvalError(f"k={k} is outside the candidate set")
    return len(set(pred_ranking[:k]) & set(true_ranking[:k])) / k


def r_a_at_b(pred_ranking: Sequence, true_ranking: Sequence, a: int, b: int) -> float:
    """Recall of the true top-a within the predicted top-b."""
    if a < 1 or b < a or b > len(pred_ranking) or a > len(true_ranking):
        raise EvalError(f"R{a}@{b} is outside the candidate set")
    return len(set(pred_ranking[:b]) & set(true_ranking[:a])) / a


def rankings_from_scores(scores: np.ndarray, ids: Sequence[str] | None = None,
                         descending: bool = False) -> list[list]:
    """Per-row candidate ordering; ties broken by ascending id (or index)."""
    scores = np.asarray(scores, dtype=np.float64)
    keys = np.array(ids) if ids is not None else np.arange(scores.shape[1])
    out = []
    for row in scores:
        order = np.lexsort((keys, -row if descending else row))
        out.append([keys[j].item() if hasattr(keys[j], "item") else keys[j] for j in order])
    return out


def mean_hr(preds: Sequence[Sequence], trues: Sequence[Sequence], k: int) -> float:
    return float(np.mean([hr_at_k(p, t, k) for p, t in zip(preds, trues)]))


def mean_r_a_at_b(preds: Sequence[Sequence], trues: Sequence[Sequence], a: int, b: int) -> float:
    return float(np.mean([r_a_at_b(p, t, a, b) for p, t in zip(preds, trues)]))


@dataclass
class EvalReport:
    mean_rank: float | None = None
    hr_at_k: dict[int, float] = field(default_factory=dict)
    r5_at_20: float | None = None
    config: dict = field(default_factory=dict)
    seed: int = 0
    sweeps: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mean_rank is not None and self.mean_rank < 1:
            raise EvalError("mean rank is at least 1")
        if any(not 0.0 <= v <= 1.0 for v in self.hr_at_k.values()):
            raise EvalError("hit ratios lie in [0, 1]")
        if self.r5_at_20 is not None and not 0.0 <= self.r5_at_20 <= 1.0:
            raise EvalError("R5@20 lies in [0, 1]")

    def to_json(self) -> str:
        d = asdict(self)
        d["hr_at_k"] = {str(k): v for k, v in sorted(self.hr_at_k.items())}
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        d["hr_at_k"] = {int(k): v for k, v in d["hr_at_k"].items()}
        return cls(**d)
