"""Regular grid over the data region, its 8-neighbor cell graph, and
skip-gram cell embeddings learned from random walks on that graph.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .geo import Trajectory

log = logging.getLogger(__name__)

_OFFSETS = np.array([(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)], dtype=np.int64)


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    origin_x: float
    origin_y: float
    cell_side: float
    n_cols: int
    n_rows: int

    def __post_init__(self):
        if not self.cell_side > 0:
            raise GridError("cell_side must be positive")
        if self.n_cols < 1 or self.n_rows < 1:
            raise GridError("grid needs at least one cell")

    @property
    def n_cells(self) -> int:
        return self.n_cols * self.n_rows

    def cell_of(self, points: np.ndarray) -> np.ndarray:
        """(col, row) for each point; the global max edge is clamped inward."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        off = pts - (self.origin_x, self.origin_y)
        cr = np.floor(off / self.cell_side).astype(np.int64)
        extent = np.array([self.n_cols, self.n_rows]) * self.cell_side
        cr = np.where(off == extent, cr - 1, cr)
        bad = (cr[:, 0] < 0) | (cr[:, 0] >= self.n_cols) | (cr[:, 1] < 0) | (cr[:, 1] >= self.n_rows)
        if np.any(bad):
            p = pts[np.argmax(bad)]
            raise GridError(f"point ({p[0]:.1f}, {p[1]:.1f}) lies outside the grid")
        return cr

    def to_dict(self) -> dict:
        return {"origin_x": self.origin_x, "origin_y": self.origin_y, "cell_side": self.cell_side,
                "n_cols": self.n_cols, "n_rows": self.n_rows}

    @classmethod
    def from_dict(cls, d: dict) -> Grid:
        return cls(float(d["origin_x"]), float(d["origin_y"]), float(d["cell_side"]),
                   int(d["n_cols"]), int(d["n_rows"]))


def build_grid(region_bbox: Sequence[float], cell_side: float = 100.0, margin_cells: int = 0) -> Grid:
    """Grid covering ``(min_x, min_y, max_x, max_y)``, optionally padded by whole cells."""
    min_x, min_y, max_x, max_y = map(float, region_bbox)
    if not cell_side > 0:
        raise GridError("cell_side must be positive")
    if not (max_x > min_x and max_y > min_y):
        raise GridError(f"degenerate bounding box {region_bbox}")
    pad = margin_cells * cell_side
    min_x, min_y, max_x, max_y = min_x - pad, min_y - pad, max_x + pad, max_y + pad
    n_cols = math.ceil(round((max_x - min_x) / cell_side, 9))
    n_rows = math.ceil(round((max_y - min_y) / cell_side, 9))
    return Grid(min_x, min_y, cell_side, n_cols, n_rows)


def grid_for_trajectories(trajs: Sequence[Trajectory], cell_side: float = 100.0) -> Grid:
    allp = np.concatenate([t.points for t in trajs])
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    hi = np.maximum(hi, lo + cell_side)
    return build_grid((lo[0], lo[1], hi[0], hi[1]), cell_side, margin_cells=1)


@dataclass
class CellGraph:
    """Undirected 8-neighbor adjacency over a set of (col, row) cells.

    ``neighbors[i]`` lists node ids adjacent to node ``i`` padded with -1.
    """

    cells: np.ndarray
    neighbors: np.ndarray
    degree: np.ndarray
    index: dict[tuple[int, int], int] = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return int(self.degree.sum()) // 2


def build_cell_graph(grid: Grid, cells: np.ndarray | None = None) -> CellGraph:
    """Graph over all grid cells, or over the given subset of (col, row) cells."""
    if cells is None:
        cols, rows = np.meshgrid(np.arange(grid.n_cols), np.arange(grid.n_rows), indexing="xy")
        cells = np.stack([cols.ravel(), rows.ravel()], axis=1)
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    order = np.lexsort((cells[:, 0], cells[:, 1]))
    cells = cells[order]
    index = {(int(c), int(r)): i for i, (c, r) in enumerate(cells)}
    nbrs = np.full((len(cells), 8), -1, dtype=np.int64)
    for k, (dc, dr) in enumerate(_OFFSETS):
        for i, (c, r) in enumerate(cells):
            j = index.get((int(c + dc), int(r + dr)))
            if j is not None:
                nbrs[i, k] = j
    # compact each row so valid neighbors come first
    valid = nbrs >= 0
    degree = valid.sum(axis=1)
    packed = np.full_like(nbrs, -1)
    for i in range(len(cells)):
        packed[i, :degree[i]] = nbrs[i][valid[i]]
    return CellGraph(cells, packed, degree, index)


def active_cells(grid: Grid, trajs: Sequence[Trajectory], margin: int = 1) -> np.ndarray:
    """Cells hit by any point, plus their neighbors out to ``margin`` cells."""
    hit = np.unique(np.concatenate([grid.cell_of(t.points) for t in trajs]), axis=0)
    if margin <= 0:
        return hit
    offs = np.array([(dc, dr) for dc in range(-margin, margin + 1) for dr in range(-margin, margin + 1)])
    grown = (hit[:, None, :] + offs[None, :, :]).reshape(-1, 2)
    inside = (grown[:, 0] >= 0) & (grown[:, 0] < grid.n_cols) & (grown[:, 1] >= 0) & (grown[:, 1] < grid.n_rows)
    return np.unique(grown[inside], axis=0)


# ------------------------------------------------------------ random walks


def random_walks(graph: CellGraph, walks_per_node: int = 10, walk_len: int = 80,
                 rng: np.random.Generator | None = None, p: float = 1.0, q: float = 1.0) -> np.ndarray:
    """Walk corpus of shape (n_nodes * walks_per_node, walk_len), -1 padded.

    With p = q = 1 every step is uniform over neighbors; otherwise steps use
    node2vec's return/in-out biases. Isolated nodes yield length-1 walks.
    """
    if walk_len < 2:
        raise ValueError("walk_len must be at least 2")
    rng = rng if rng is not None else np.random.default_rng()
    n = graph.n_nodes
    starts = np.tile(np.arange(n), walks_per_node)
    walks = np.full((len(starts), walk_len), -1, dtype=np.int64)
    walks[:, 0] = starts
    alive = graph.degree[starts] > 0
    biased = not (p == 1.0 and q == 1.0)
    for step in range(1, walk_len):
        cur = walks[:, step - 1]
        u = rng.random(len(starts))
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        c = cur[idx]
        deg = graph.degree[c]
        if not biased or step == 1:
            pick = np.minimum((u[idx] * deg).astype(np.int64), deg - 1)
            walks[idx, step] = graph.neighbors[c, pick]
            continue
        prev = walks[idx, step - 2]
        cand = graph.neighbors[c]
        ok = cand >= 0
        cc = graph.cells[np.where(ok, cand, 0)]
        pc = graph.cells[prev][:, None, :]
        cheb = np.abs(cc - pc).max(axis=2)
        w = np.where(cand == prev[:, None], 1.0 / p, np.where(cheb <= 1, 1.0, 1.0 / q))
        w = np.where(ok, w, 0.0)
        cdf = np.cumsum(w, axis=1)
        target = u[idx] * cdf[:, -1]
        pick = np.minimum((cdf <= target[:, None]).sum(axis=1), deg - 1)
        walks[idx, step] = cand[np.arange(len(idx)), pick]
    return walks


# --------------------------------------------------------------- skip-gram


@dataclass
class CellEmbeddingTable:
    """Cell vectors keyed by (col, row); lookups of unknown cells give zeros."""

    grid: Grid
    cells: np.ndarray
    vectors: np.ndarray
    index: dict[tuple[int, int], int] = field(default=None, repr=False)

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 2)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if len(self.cells) != len(self.vectors):
            raise GridError("cell table row count differs from cell count")
        if not np.all(np.isfinite(self.vectors)):
            raise GridError("cell table contains non-finite values")
        if self.index is None:
            self.index = {(int(c), int(r)): i for i, (c, r) in enumerate(self.cells)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def rows_for(self, points: np.ndarray) -> np.ndarray:
        """Row index per point (-1 for cells outside the table)."""
        cr = self.grid.cell_of(points)
        return np.array([self.index.get((int(c), int(r)), -1) for c, r in cr], dtype=np.int64)

    def lookup(self, points: np.ndarray) -> np.ndarray:
        rows = self.rows_for(points)
        out = np.zeros((len(rows), self.dim), dtype=np.float32)
        ok = rows >= 0
        out[ok] = self.vectors[rows[ok]]
        return out

    def cell_ids(self) -> list[str]:
        return [f"{c},{r}" for c, r in self.cells]


@njit(cache=True)
def _sgns_epoch(walks, syn0, syn1, cum_table, window, negatives, lr0, lr_min,
                done_before, total, seed):
    state = np.uint64(seed) | np.uint64(1)
    dim = syn0.shape[1]
    n_table = cum_table.shape[0]
    loss = 0.0
    pairs = 0
    processed = done_before
    neu = np.zeros(dim, dtype=np.float32)
    for w in range(walks.shape[0]):
        walk = walks[w]
        length = 0
        while length < walk.shape[0] and walk[length] >= 0:
            length += 1
        for i in range(length):
            lr = lr0 - (lr0 - lr_min) * processed / total
            if lr < lr_min:
                lr = lr_min
            processed += 1
            state = state * np.uint64(6364136223846793005) + np.uint64(1442695040888963407)
            shrink = int((state >> np.uint64(33)) % np.uint64(window))
            center = walk[i]
            lo = max(0, i - window + shrink)
            hi = min(length, i + window - shrink + 1)
            for j in range(lo, hi):
                if j == i:
                    continue
                ctx = walk[j]
                for k in range(dim):
                    neu[k] = 0.0
                for s in range(negatives + 1):
                    if s == 0:
                        target = center
                        label = 1.0
                    else:
                        state = state * np.uint64(6364136223846793005) + np.uint64(1442695040888963407)
                        r = (state >> np.uint64(11)) / 9007199254740992.0
                        lo_i, hi_i = 0, n_table - 1
                        while lo_i < hi_i:
                            mid = (lo_i + hi_i) // 2
                            if cum_table[mid] < r:
                                lo_i = mid + 1
                            else:
                                hi_i = mid
                        target = lo_i
                        if target == center:
                            continue
                        label = 0.0
                    f = 0.0
                    for k in range(dim):
                        f += syn0[ctx, k] * syn1[target, k]
                    if f > 30.0:
                        f = 30.0
                    elif f < -30.0:
                        f = -30.0
                    sig = 1.0 / (1.0 + np.exp(-f))
                    if label == 1.0:
                        loss -= np.log(sig + 1e-12)
                    else:
                        loss -= np.log(1.0 - sig + 1e-12)
                    g = (label - sig) * lr
                    for k in range(dim):
                        neu[k] += g * syn1[target, k]
                        syn1[target, k] += g * syn0[ctx, k]
                for k in range(dim):
                    syn0[ctx, k] += neu[k]
                pairs += 1
    return loss / max(pairs, 1)


@dataclass
class SkipGramConfig:
    dim: int = 256
    window: int = 5
    negatives: int = 5
    epochs: int = 5
    lr: float = 0.025
    walks_per_node: int = 10
    walk_len: int = 80
    p: float = 1.0
    q: float = 1.0


def train_skipgram(corpus: np.ndarray, n_nodes: int, dim: int = 256, window: int = 5, negatives: int = 5,
                   epochs: int = 5, lr: float = 0.025, rng: np.random.Generator | None = None,
                   ) -> tuple[np.ndarray, list[float]]:
    """Skip-gram with negative sampling over a (-1 padded) walk corpus.

    Returns the (n_nodes, dim) input-vector table and the mean loss per epoch.
    The learning rate decays linearly to ``lr * 1e-4`` over all epochs.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    if corpus.size == 0 or not np.any(corpus >= 0):
        raise ValueError("empty corpus")
    if dim < 2:
        raise ValueError("embedding dim must be at least 2")
    rng = rng if rng is not None else np.random.default_rng()
    syn0 = ((rng.random((n_nodes, dim)) - 0.5) / dim).astype(np.float32)
    syn1 = np.zeros((n_nodes, dim), dtype=np.float32)
    counts = np.bincount(corpus[corpus >= 0], minlength=n_nodes).astype(np.float64)
    weights = counts**0.75
    cum = np.cumsum(weights) / weights.sum()
    tokens = int((corpus >= 0).sum())
    total = float(tokens * epochs)
    losses = []
    for ep in range(epochs):
        order = rng.permutation(len(corpus))
        seed = int(rng.integers(1, 2**62))
        loss = _sgns_epoch(corpus[order], syn0, syn1, cum, max(1, window), negatives,
                           lr, lr * 1e-4, float(ep * tokens), total, seed)
        losses.append(float(loss))
        log.info("skip-gram epoch %d/%d loss %.4f", ep + 1, epochs, loss)
    return syn0, losses


def build_cell_embeddings(trajs: Sequence[Trajectory], cell_side: float = 100.0,
                          cfg: SkipGramConfig | None = None, seed: int = 0,
                          grid: Grid | None = None) -> tuple[CellEmbeddingTable, list[float]]:
    """Grid + sparse cell graph + walks + skip-gram, end to end."""
    cfg = cfg or SkipGramConfig()
    rng = np.random.default_rng(seed)
    grid = grid or grid_for_trajectories(trajs, cell_side)
    graph = build_cell_graph(grid, active_cells(grid, trajs))
    walks = random_walks(graph, cfg.walks_per_node, cfg.walk_len, rng, cfg.p, cfg.q)
    vecs, losses = train_skipgram(walks, graph.n_nodes, cfg.dim, cfg.window, cfg.negatives,
                                  cfg.epochs, cfg.lr, rng)
    return CellEmbeddingTable(grid, graph.cells, vecs, graph.index), losses


# ------------------------------------------------------------- persistence


def _grid_sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".grid.json")


def save_cell_table(table: CellEmbeddingTable, path: str | Path, meta: dict | None = None) -> None:
    """Rows go to the embedding file format (ids ``"col,row"``); the grid
    geometry goes to a ``<path>.grid.json`` sidecar."""
    from .search import write_embeddings

    path = Path(path)
    write_embeddings(path, table.cell_ids(), table.vectors)
    doc = {"grid": table.grid.to_dict(), **(meta or {})}
    _grid_sidecar(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_cell_table(path: str | Path) -> CellEmbeddingTable:
    from .search import FormatError, read_embeddings

    path = Path(path)
    ids, vecs = read_embeddings(path)
    try:
        doc = json.loads(_grid_sidecar(path).read_text(encoding="utf-8"))
        grid = Grid.from_dict(doc["grid"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: missing or invalid grid sidecar: {e}") from e
    cells = np.array([[int(v) for v in i.split(",")] for i in ids], dtype=np.int64).reshape(-1, 2)
    return CellEmbeddingTable(grid, cells, vecs)
