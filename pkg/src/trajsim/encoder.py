"""Dual-feature self-attention trajectory encoder.

Each point carries two feature rows: its grid cell's embedding (structural,
width ``d_t``) and a spatial 4-tuple ``(x, y, turn angle, mean adjacent
segment length)``. Both get sinusoidal position encodings. Every encoder
layer computes structural attention from the cell features and spatial
attention from a small stack of self-attention sublayers over the spatial
features, mixes them as ``A_t + gamma * A_s`` per head, and applies the
result to the structural values. Masked mean pooling over points gives the
trajectory embedding ``h``; a two-layer projection head maps it to ``z``.

Cost per trajectory is O(l^2 * d * L) for l points, width d and L layers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .geo import Trajectory
from .grid import CellEmbeddingTable, Grid


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_t: int = 256
    d_s: int = 4
    h: int = 4
    h_s: int = 4
    n_layers: int = 2
    n_spatial_sublayers: int = 2
    mlp_expansion: int = 4
    dropout: float = 0.1
    l_max: int = 200
    d_proj: int | None = None
    spatial_width: int | None = None
    dtype: str = "float32"

    def __post_init__(self):
        width = self.spatial_width or self.d_s
        if self.d_t % self.h:
            raise EncoderError(f"d_t={self.d_t} is not divisible by h={self.h}")
        if width % self.h_s:
            raise EncoderError(f"spatial width {width} is not divisible by h_s={self.h_s}")
        if self.h != self.h_s:
            raise EncoderError("structural and spatial attention need the same head count to be mixed per head")
        if self.n_layers < 1 or self.n_spatial_sublayers < 1:
            raise EncoderError("need at least one layer and one spatial sublayer")
        if not 0.0 <= self.dropout < 1.0:
            raise EncoderError("dropout must be in [0, 1)")

    @property
    def proj_dim(self) -> int:
        return self.d_proj or max(1, self.d_t // 2)

    @property
    def s_width(self) -> int:
        return self.spatial_width or self.d_s

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SpatialNorm:
    """Standardization constants for the spatial features (training split)."""

    mean_x: float = 0.0
    mean_y: float = 0.0
    std_x: float = 1.0
    std_y: float = 1.0
    length_scale: float = 100.0

    @classmethod
    def fit(cls, trajs: Sequence[Trajectory], length_scale: float = 100.0) -> SpatialNorm:
        pts = np.concatenate([t.points for t in trajs])
        std = pts.std(axis=0)
        std = np.where(std > 0, std, 1.0)
        return cls(float(pts[:, 0].mean()), float(pts[:, 1].mean()), float(std[0]), float(std[1]), length_scale)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- features


def turn_and_length(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Interior angle at each point (radians, in [0, pi]) and the mean length
    of its adjacent segments.

    Endpoints behave like a straight continuation: angle pi and the length of
    their single segment. A zero-length neighbor segment also yields pi.
    """
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    if n < 2:
        raise EncoderError("need at least two points")
    seg = np.diff(p, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    r = np.full(n, np.pi)
    ln = np.empty(n)
    ln[0] = seg_len[0]
    ln[-1] = seg_len[-1]
    if n > 2:
        back = -seg[:-1]
        fwd = seg[1:]
        nb = seg_len[:-1]
        nf = seg_len[1:]
        ok = (nb > 0) & (nf > 0)
        cos = np.ones(n - 2)
        cos[ok] = (back[ok] * fwd[ok]).sum(axis=1) / (nb[ok] * nf[ok])
        r[1:-1] = np.where(ok, np.arccos(np.clip(cos, -1.0, 1.0)), np.pi)
        ln[1:-1] = 0.5 * (nb + nf)
    return r, ln


def position_encoding(n: int, d_p: int) -> np.ndarray:
    """(n, d_p) sinusoids: sin(i / 10000^(j/d_p)) at even j, cos(i / 10000^((j-1)/d_p)) at odd j."""
    i = np.arange(n, dtype=np.float64)[:, None]
    j = np.arange(d_p)
    even_j = j - (j % 2)
    angle = i / np.power(10000.0, even_j / d_p)[None, :]
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


def add_position_encoding(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    return m + position_encoding(m.shape[0], m.shape[1]).astype(m.dtype)


def enrich(traj: Trajectory, table: CellEmbeddingTable, norm: SpatialNorm) -> tuple[np.ndarray, np.ndarray]:
    """Structural (n, d_t) and spatial (n, 4) rows for one trajectory, before position encoding."""
    pts = traj.points
    if len(pts) < 2:
        raise EncoderError(f"trajectory {traj.id!r} has fewer than two points")
    struct = table.lookup(pts)
    r, ln = turn_and_length(pts)
    spatial = np.stack([
        (pts[:, 0] - norm.mean_x) / norm.std_x,
        (pts[:, 1] - norm.mean_y) / norm.std_y,
        r,
        ln / norm.length_scale,
    ], axis=1)
    return struct, spatial


@dataclass
class FeatureBatch:
    structural: np.ndarray
    spatial: np.ndarray
    valid: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.structural.shape[0]

    @property
    def length(self) -> int:
        return self.structural.shape[1]


def make_batch(trajs: Sequence[Trajectory], table: CellEmbeddingTable, norm: SpatialNorm,
               cfg: EncoderConfig, pad_to: int | None = None) -> FeatureBatch:
    """Enrich, position-encode and zero-pad a batch (padded rows stay all-zero)."""
    if not trajs:
        raise EncoderError("empty batch")
    lengths = [len(t) for t in trajs]
    if max(lengths) > cfg.l_max:
        raise EncoderError(f"trajectory with {max(lengths)} points exceeds l_max={cfg.l_max}")
    l = pad_to or max(lengths)
    if l < max(lengths):
        raise EncoderError("pad_to is shorter than the longest trajectory")
    dt = cfg.np_dtype
    T = np.zeros((len(trajs), l, table.dim), dtype=dt)
    S = np.zeros((len(trajs), l, cfg.d_s), dtype=dt)
    valid = np.zeros((len(trajs), l), dtype=bool)
    pe_t = position_encoding(l, table.dim)
    pe_s = position_encoding(l, cfg.d_s) if cfg.spatial_width is None else None
    for b, t in enumerate(trajs):
        n = len(t)
        st, sp = enrich(t, table, norm)
        T[b, :n] = st + pe_t[:n]
        S[b, :n] = sp + pe_s[:n] if pe_s is not None else sp
        valid[b, :n] = True
    return FeatureBatch(T, S, valid)


# ------------------------------------------------------------------ params


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_params(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """All learnable tensors, keyed by dotted name (insertion order is stable)."""
    dt = cfg.np_dtype
    p: dict[str, np.ndarray] = {}
    d, ds = cfg.d_t, cfg.s_width
    if cfg.spatial_width is not None:
        p["spatial_in.w"] = _xavier(rng, cfg.d_s, ds, dt)
        p["spatial_in.b"] = np.zeros(ds, dt)

    def block(prefix: str, width: int, full: bool):
        p[f"{prefix}.wq"] = _xavier(rng, width, width, dt)
        p[f"{prefix}.wk"] = _xavier(rng, width, width, dt)
        if not full:
            return
        p[f"{prefix}.wv"] = _xavier(rng, width, width, dt)
        p[f"{prefix}.wo"] = _xavier(rng, width, width, dt)
        p[f"{prefix}.ln1.g"] = np.ones(width, dt)
        p[f"{prefix}.ln1.b"] = np.zeros(width, dt)
        hid = width * cfg.mlp_expansion
        p[f"{prefix}.mlp.w1"] = _xavier(rng, width, hid, dt)
        p[f"{prefix}.mlp.b1"] = np.zeros(hid, dt)
        p[f"{prefix}.mlp.w2"] = _xavier(rng, hid, width, dt)
        p[f"{prefix}.mlp.b2"] = np.zeros(width, dt)
        p[f"{prefix}.ln2.g"] = np.ones(width, dt)
        p[f"{prefix}.ln2.b"] = np.zeros(width, dt)

    for k in range(cfg.n_layers):
        for j in range(cfg.n_spatial_sublayers):
            # the last spatial sublayer only contributes its attention matrix
            block(f"layer{k}.spatial{j}", ds, full=j < cfg.n_spatial_sublayers - 1)
        block(f"layer{k}.struct", d, full=True)
        p[f"layer{k}.gamma"] = np.ones((), dt)
    p["proj.w1"] = _xavier(rng, d, d, dt)
    p["proj.b1"] = np.zeros(d, dt)
    p["proj.w2"] = _xavier(rng, d, cfg.proj_dim, dt)
    p["proj.b2"] = np.zeros(cfg.proj_dim, dt)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def layer_param_names(params: dict[str, Tensor], layer: int) -> list[str]:
    return [k for k in params if k.startswith(f"layer{layer}.")]


# ----------------------------------------------------------------- forward


def _split_heads(x: Tensor, h: int) -> Tensor:
    B, l, d = x.shape
    return ag.transpose(ag.reshape(x, (B, l, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, l, dh = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (B, l, h * dh))


def _attention(x: Tensor, params: dict[str, Tensor], prefix: str, h: int, key_mask: np.ndarray) -> Tensor:
    q = _split_heads(ag.matmul(x, params[f"{prefix}.wq"]), h)
    k = _split_heads(ag.matmul(x, params[f"{prefix}.wk"]), h)
    dh = x.shape[-1] // h
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(dh))
    return ag.softmax_last_dim(scores, key_mask)


def _sublayer_tail(x: Tensor, c: Tensor, params, prefix: str, cfg: EncoderConfig, train: bool, rng) -> Tensor:
    """LayerNorm(x + Dropout(c)), then the MLP sublayer with its own residual and LayerNorm."""
    x1 = ag.layer_norm(ag.add(x, ag.dropout(c, cfg.dropout, rng, train)),
                       params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    hid = ag.relu(ag.linear(x1, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    m = ag.linear(hid, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return ag.layer_norm(ag.add(x1, ag.dropout(m, cfg.dropout, rng, train)),
                         params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def key_mask_for(valid: np.ndarray, dtype) -> np.ndarray:
    """Additive (B, 1, 1, l) mask: 0 on valid keys, -inf on padding."""
    m = np.where(valid, 0.0, -np.inf).astype(dtype)
    return m[:, None, None, :]


def spatial_attention(S: Tensor, key_mask: np.ndarray, params: dict[str, Tensor], layer: int,
                      cfg: EncoderConfig, train: bool, rng) -> Tensor:
    """Run the spatial sublayer stack; return the last sublayer's attention (B, h, l, l)."""
    x = S
    for j in range(cfg.n_spatial_sublayers):
        prefix = f"layer{layer}.spatial{j}"
        a = _attention(x, params, prefix, cfg.h_s, key_mask)
        if j == cfg.n_spatial_sublayers - 1:
            return a
        v = _split_heads(ag.matmul(x, params[f"{prefix}.wv"]), cfg.h_s)
        c = ag.matmul(_merge_heads(ag.matmul(a, v)), params[f"{prefix}.wo"])
        x = _sublayer_tail(x, c, params, prefix, cfg, train, rng)
    raise AssertionError("unreachable")


def dual_msm(T: Tensor, S: Tensor, valid: np.ndarray, params: dict[str, Tensor], layer: int,
             cfg: EncoderConfig, train: bool = False, rng=None, trace: dict | None = None) -> Tensor:
    """Mixed-attention output C_ts of one encoder layer, shape (B, l, d_t)."""
    key_mask = key_mask_for(valid, T.dtype)
    a_s = spatial_attention(S, key_mask, params, layer, cfg, train, rng)
    prefix = f"layer{layer}.struct"
    a_t = _attention(T, params, prefix, cfg.h, key_mask)
    mixed = ag.add(a_t, ag.mul(a_s, params[f"layer{layer}.gamma"]))
    v = _split_heads(ag.matmul(T, params[f"{prefix}.wv"]), cfg.h)
    if trace is not None:
        trace[f"layer{layer}.a_t"] = a_t.data
        trace[f"layer{layer}.a_s"] = a_s.data
    return ag.matmul(_merge_heads(ag.matmul(mixed, v)), params[f"{prefix}.wo"])


def encode_points(batch: FeatureBatch, params: dict[str, Tensor], cfg: EncoderConfig,
                  train: bool = False, rng=None, trace: dict | None = None) -> Tensor:
    """Per-point representations of the last layer, (B, l, d_t)."""
    if train and cfg.dropout > 0 and rng is None:
        raise EncoderError("training mode with dropout needs an rng")
    T = Tensor(batch.structural.astype(cfg.np_dtype, copy=False))
    S = Tensor(batch.spatial.astype(cfg.np_dtype, copy=False))
    if cfg.spatial_width is not None:
        S = ag.linear(S, params["spatial_in.w"], params["spatial_in.b"])
        pe = position_encoding(S.shape[1], cfg.s_width).astype(cfg.np_dtype)
        S = ag.add(S, pe[None] * batch.valid[:, :, None])
    x = T
    for k in range(cfg.n_layers):
        c = dual_msm(x, S, batch.valid, params, k, cfg, train, rng, trace)
        x = _sublayer_tail(x, c, params, f"layer{k}.struct", cfg, train, rng)
    return x


def project(h: Tensor, params: dict[str, Tensor]) -> Tensor:
    hid = ag.relu(ag.linear(h, params["proj.w1"], params["proj.b1"]))
    return ag.linear(hid, params["proj.w2"], params["proj.b2"])


def encode(batch: FeatureBatch, params: dict[str, Tensor], cfg: EncoderConfig,
           train: bool = False, rng=None, trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """Trajectory embeddings ``h`` (B, d_t) and projections ``z`` (B, d_proj)."""
    x = encode_points(batch, params, cfg, train, rng, trace)
    h = ag.mean_pool_rows(x, batch.valid)
    if trace is not None:
        trace["points"] = x.data
    return h, project(h, params)


@dataclass
class Encoder:
    """Bundle of config, weights, cell table and standardization constants."""

    cfg: EncoderConfig
    params: dict[str, Tensor]
    table: CellEmbeddingTable
    norm: SpatialNorm = field(default_factory=SpatialNorm)

    @classmethod
    def create(cls, cfg: EncoderConfig, table: CellEmbeddingTable, norm: SpatialNorm, seed: int = 0) -> Encoder:
        if table.dim != cfg.d_t:
            raise EncoderError(f"cell table width {table.dim} != d_t {cfg.d_t}")
        return cls(cfg, init_params(cfg, np.random.default_rng(seed)), table, norm)

    def batch(self, trajs: Sequence[Trajectory]) -> FeatureBatch:
        return make_batch(trajs, self.table, self.norm, self.cfg)

    def forward(self, trajs: Sequence[Trajectory], train: bool = False, rng=None,
                params: dict[str, Tensor] | None = None) -> tuple[Tensor, Tensor]:
        return encode(self.batch(trajs), params or self.params, self.cfg, train, rng)

    def embed(self, trajs: Sequence[Trajectory], batch_size: int = 64) -> np.ndarray:
        """Eval-mode ``h`` for many trajectories, (n, d_t) float32."""
        out = []
        with ag.no_grad():
            for i in range(0, len(trajs), batch_size):
                h, _ = self.forward(trajs[i:i + batch_size])
                out.append(h.data)
        if not out:
            return np.zeros((0, self.cfg.d_t), dtype=np.float32)
        return np.concatenate(out).astype(np.float32)

    def copy_params(self) -> dict[str, Tensor]:
        return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}

    # ---------------------------------------------------------- persistence

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {f"{prefix}param.{k}": v.data for k, v in self.params.items()}
        out[f"{prefix}cells.index"] = self.table.cells
        out[f"{prefix}cells.vectors"] = self.table.vectors
        return out

    def header(self) -> dict:
        return {"kind": "encoder", "encoder": self.cfg.to_dict(), "norm": self.norm.to_dict(),
                "grid": self.table.grid.to_dict()}

    def save(self, path, extra_header: dict | None = None) -> None:
        checkpoint.save(path, self.arrays(), {**self.header(), **(extra_header or {})})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], header: dict, prefix: str = "") -> Encoder:
        try:
            cfg = EncoderConfig(**header["encoder"])
            norm = SpatialNorm(**header["norm"])
            grid = Grid.from_dict(header["grid"])
        except (KeyError, TypeError) as e:
            raise checkpoint.CheckpointError(f"checkpoint header is missing encoder metadata: {e}") from e
        table = CellEmbeddingTable(grid, arrays[f"{prefix}cells.index"], arrays[f"{prefix}cells.vectors"])
        pre = f"{prefix}param."
        params = {k[len(pre):]: Tensor(v.astype(cfg.np_dtype), requires_grad=True)
                  for k, v in arrays.items() if k.startswith(pre)}
        expected = init_params(cfg, np.random.default_rng(0))
        if set(params) != set(expected) or any(params[k].shape != expected[k].shape for k in expected):
            raise checkpoint.CheckpointError("checkpoint parameters do not match the encoder config")
        params = {k: params[k] for k in expected}
        return cls(cfg, params, table, norm)

    @classmethod
    def load(cls, path) -> Encoder:
        arrays, header = checkpoint.load(path)
        return cls.from_arrays(arrays, header)
