"""Small fixtures shared by the model-level tests."""

import numpy as np

from trajsim.encoder import Encoder, EncoderConfig, SpatialNorm
from trajsim.grid import CellEmbeddingTable, grid_for_trajectories


def random_table(trajs, dim: int, seed: int = 0, side: float = 100.0) -> CellEmbeddingTable:
    """Every grid cell gets a random unit-scale vector."""
    grid = grid_for_trajectories(trajs, side)
    cells = np.array([(c, r) for c in range(grid.n_cols) for r in range(grid.n_rows)])
    vecs = np.random.default_rng(seed).normal(0, 0.5, (len(cells), dim))
    return CellEmbeddingTable(grid, cells, vecs)


def tiny_encoder(trajs, seed: int = 0, **overrides) -> Encoder:
    kw = dict(d_t=16, h=2, h_s=2, n_layers=1, dropout=0.0, l_max=64)
    kw.update(overrides)
    cfg = EncoderConfig(**kw)
    return Encoder.create(cfg, random_table(trajs, cfg.d_t, seed), SpatialNorm.fit(trajs), seed=seed)
