"""Momentum-contrast pretraining of the trajectory encoder.

Per batch: two augmented views of every trajectory go through the online
encoder (gradients) and the momentum encoder (no gradients); an InfoNCE
loss contrasts each online projection against its own momentum-side view
and a FIFO queue of past momentum-side projections. Only the online weights
see the optimizer; the momentum weights follow them by exponential
averaging. The batch's momentum projections enter the queue after the loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .augment import AugmentConfig, make_views
from .autograd import Tensor
from .encoder import Encoder, encode
from .geo import Trajectory
from .optim import AdamState, adam_step, step_decay_lr, zero_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    queue_size: int = 2048
    temperature: float = 0.07
    momentum: float = 0.999
    lr: float = 0.001
    lr_decay_every: int = 5
    max_epochs: int = 20
    patience: int = 5
    seed: int = 0
    view1: str = "mask"
    view2: str = "truncate"
    batch_negatives: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        if self.batch_size < 1 or self.queue_size % self.batch_size:
            raise ValueError("queue_size must be a multiple of batch_size")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")


# -------------------------------------------------------------------- loss


def infonce_loss(z: Tensor, z_pos: np.ndarray, queue: np.ndarray, temperature: float,
                 batch_negatives: bool = False) -> Tensor:
    """Mean over rows of -log softmax of the positive among [positive, negatives].

    ``z_pos`` and ``queue`` are constants (no gradient). Similarities are
    cosines; with an empty queue and no batch negatives the loss is 0.
    """
    z = ag.as_tensor(z)
    B = z.shape[0]
    z_pos = np.asarray(z_pos, dtype=z.dtype)
    if z_pos.shape != z.shape:
        raise ag.ShapeError(f"infonce_loss: z {z.shape} vs positives {z_pos.shape}")
    pn = z_pos / _row_norms(z_pos)
    zn = ag.l2_normalize_rows(z)
    inv_t = 1.0 / temperature
    pos = ag.scale(ag.sum_(ag.mul(zn, pn), axis=-1), inv_t)
    parts = [ag.reshape(pos, (B, 1))]
    queue = np.asarray(queue, dtype=z.dtype).reshape(-1, z.shape[1])
    if len(queue):
        qn = queue / _row_norms(queue)
        parts.append(ag.scale(ag.matmul(zn, Tensor(qn.T)), inv_t))
    if batch_negatives and B > 1:
        other = ag.scale(ag.matmul(zn, Tensor(pn.T)), inv_t)
        diag = np.where(np.eye(B, dtype=bool), -np.inf, 0.0).astype(z.dtype)
        parts.append(ag.add(other, diag))
    logits = ag.concat_last_dim(parts)
    return ag.mean(ag.sub(ag.logsumexp_last_dim(logits), pos))


def _row_norms(x: np.ndarray) -> np.ndarray:
    n = np.sqrt((x.astype(np.float64) ** 2).sum(axis=-1, keepdims=True))
    if np.any(n == 0):
        raise ValueError("zero-norm vector in InfoNCE input")
    return n.astype(x.dtype)


# ------------------------------------------------------------ state pieces


def momentum_update(online: dict[str, Tensor], target: dict[str, Tensor], m: float) -> None:
    """In place: target <- m * target + (1 - m) * online, elementwise."""
    if online.keys() != target.keys():
        raise ValueError("online and momentum parameter sets differ")
    for k, p in online.items():
        t = target[k]
        if t.shape != p.shape:
            raise ag.ShapeError(f"momentum_update: {k} has shapes {p.shape} and {t.shape}")
        dt = t.data.dtype
        t.data = np.asarray(dt.type(m) * t.data + dt.type(1.0 - m) * p.data, dtype=dt)


class NegativeQueue:
    """Fixed-capacity FIFO of unit vectors.

    Slots start out holding random unit vectors (so the loss always sees a
    full queue); ``len()`` counts only vectors actually enqueued.
    """

    def __init__(self, capacity: int, dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32, warm: bool = True):
        self.capacity = capacity
        self.dim = dim
        if warm:
            rng = rng if rng is not None else np.random.default_rng(0)
            init = rng.normal(size=(capacity, dim))
            self.data = (init / np.linalg.norm(init, axis=1, keepdims=True)).astype(dtype)
            self.slots = capacity
        else:
            self.data = np.zeros((capacity, dim), dtype=dtype)
            self.slots = 0
        self.ptr = 0
        self.filled = 0

    def __len__(self) -> int:
        return self.filled

    def vectors(self) -> np.ndarray:
        """Vectors currently usable as negatives."""
        return self.data[: self.slots] if self.slots < self.capacity else self.data

    def enqueue(self, v: np.ndarray) -> None:
        v = np.asarray(v, dtype=self.data.dtype).reshape(-1, self.dim)
        v = v / _row_norms(v)
        for row in v:
            self.data[self.ptr] = row
            self.ptr = (self.ptr + 1) % self.capacity
        self.filled = min(self.capacity, self.filled + len(v))
        self.slots = max(self.slots, self.filled)


@dataclass
class TrainState:
    encoder: Encoder
    momentum_params: dict[str, Tensor]
    queue: NegativeQueue
    adam: AdamState
    epoch: int = 0
    step: int = 0
    best_loss: float = math.inf
    bad_epochs: int = 0
    history: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, encoder: Encoder, cfg: TrainConfig) -> TrainState:
        rng = np.random.default_rng([cfg.seed, 0x51])
        momentum = {k: Tensor(v.data.copy()) for k, v in encoder.params.items()}
        queue = NegativeQueue(cfg.queue_size, encoder.cfg.proj_dim, rng, encoder.cfg.np_dtype)
        return cls(encoder, momentum, queue, AdamState())

    # ------------------------------------------------------ persistence
    def arrays(self) -> dict[str, np.ndarray]:
        out = self.encoder.arrays()
        out.update({f"momentum.{k}": v.data for k, v in self.momentum_params.items()})
        out["queue.data"] = self.queue.data
        out.update(self.adam.arrays())
        return out

    def header(self, cfg: TrainConfig) -> dict:
        h = self.encoder.header()
        h.update({
            "kind": "train_state",
            "train": asdict(cfg),
            "epoch": self.epoch,
            "step": self.step,
            "best_loss": None if math.isinf(self.best_loss) else self.best_loss,
            "bad_epochs": self.bad_epochs,
            "history": self.history,
            "queue": {"ptr": self.queue.ptr, "filled": self.queue.filled, "slots": self.queue.slots},
            "adam_step": self.adam.step,
        })
        return h

    def save(self, path: str | Path, cfg: TrainConfig) -> None:
        checkpoint.save(path, self.arrays(), self.header(cfg))

    @classmethod
    def load(cls, path: str | Path) -> tuple[TrainState, TrainConfig]:
        arrays, header = checkpoint.load(path)
        if header.get("kind") != "train_state":
            raise checkpoint.CheckpointError(f"{path} is not a training checkpoint")
        enc = Encoder.from_arrays(arrays, header)
        cfg = TrainConfig(**header["train"])
        dt = enc.cfg.np_dtype
        momentum = {k: Tensor(arrays[f"momentum.{k}"].astype(dt)) for k in enc.params}
        q = NegativeQueue(cfg.queue_size, enc.cfg.proj_dim, warm=False, dtype=dt)
        q.data = arrays["queue.data"].astype(dt)
        q.ptr, q.filled, q.slots = (header["queue"][k] for k in ("ptr", "filled", "slots"))
        adam = AdamState(step=header["adam_step"])
        for k in enc.params:
            if f"adam.m.{k}" in arrays:
                adam.m[k] = arrays[f"adam.m.{k}"].astype(dt)
                adam.v[k] = arrays[f"adam.v.{k}"].astype(dt)
        best = header["best_loss"]
        state = cls(enc, momentum, q, adam, header["epoch"], header["step"],
                    math.inf if best is None else best, header["bad_epochs"], list(header["history"]))
        return state, cfg


# ---------------------------------------------------------------- training


def _views(trajs: Sequence[Trajectory], cfg: TrainConfig, rng: np.random.Generator):
    a, b = AugmentConfig(method=cfg.view1), AugmentConfig(method=cfg.view2)
    pairs = [make_views(t, a, b, rng) for t in trajs]
    return [p[0] for p in pairs], [p[1] for p in pairs]


def train_step(batch: Sequence[Trajectory], state: TrainState, cfg: TrainConfig, lr: float,
               rng: np.random.Generator) -> float:
    enc = state.encoder
    v1, v2 = _views(batch, cfg, rng)
    b1, b2 = enc.batch(v1), enc.batch(v2)
    zero_grad(enc.params)
    _, z = encode(b1, enc.params, enc.cfg, train=True, rng=rng)
    with ag.no_grad():
        _, z_pos = encode(b2, state.momentum_params, enc.cfg, train=True, rng=rng)
    loss = infonce_loss(z, z_pos.data, state.queue.vectors(), cfg.temperature, cfg.batch_negatives)
    loss.backward()
    adam_step(enc.params, state.adam, lr)
    momentum_update(enc.params, state.momentum_params, cfg.momentum)
    state.queue.enqueue(z_pos.data)
    state.step += 1
    return float(loss.data)


def train_epoch(trajs: Sequence[Trajectory], state: TrainState, cfg: TrainConfig,
                rng: np.random.Generator | None = None) -> float:
    """One pass over ``trajs`` in shuffled batches; returns the mean batch loss."""
    if not trajs:
        raise ValueError("empty training set")
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, state.epoch])
    lr = step_decay_lr(cfg.lr, state.epoch, cfg.lr_decay_every)
    order = rng.permutation(len(trajs))
    losses = []
    for i in range(0, len(order), cfg.batch_size):
        batch = [trajs[j] for j in order[i:i + cfg.batch_size]]
        losses.append(train_step(batch, state, cfg, lr, rng))
    state.epoch += 1
    return float(np.mean(losses))


def validation_loss(trajs: Sequence[Trajectory], state: TrainState, cfg: TrainConfig) -> float:
    """InfoNCE on held-out trajectories in eval mode against the frozen queue."""
    rng = np.random.default_rng([cfg.seed, 0x7A1])
    enc = state.encoder
    losses = []
    with ag.no_grad():
        for i in range(0, len(trajs), cfg.batch_size):
            v1, v2 = _views(trajs[i:i + cfg.batch_size], cfg, rng)
            _, z = encode(enc.batch(v1), enc.params, enc.cfg)
            _, zp = encode(enc.batch(v2), state.momentum_params, enc.cfg)
            losses.append(float(infonce_loss(z, zp.data, state.queue.vectors(), cfg.temperature).data))
    return float(np.mean(losses))


@dataclass
class FitResult:
    state: TrainState
    epochs_run: int
    stopped_early: bool
    best_path: Path | None
    last_path: Path | None


def fit(trajs: Sequence[Trajectory], encoder: Encoder | None, cfg: TrainConfig,
        val: Sequence[Trajectory] | None = None, out_dir: str | Path | None = None,
        resume: str | Path | None = None,
        monitor: Callable[[int, float], float] | None = None,
        meta: dict | None = None) -> FitResult:
    """Train until ``max_epochs`` or ``patience`` epochs without improvement.

    The monitored loss is the validation loss when ``val`` is given, else the
    training loss; ``monitor`` may rewrite it (used to test early stopping).
    With ``out_dir`` the state is saved to ``last.ckpt`` after every epoch
    and to ``best.ckpt`` whenever the monitored loss improves; ``meta`` is
    merged into their headers.
    """
    if resume is not None:
        state, saved_cfg = TrainState.load(resume)
        if replace(saved_cfg, max_epochs=cfg.max_epochs) != cfg:
            raise ValueError("resume config differs from the checkpointed training config")
    else:
        if encoder is None:
            raise ValueError("fit needs an encoder or a checkpoint to resume from")
        state = TrainState.create(encoder, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.ckpt" if out else None
    last_path = out / "last.ckpt" if out else None
    if resume is not None and best_path is not None:
        # carry the best state so far (kept next to the resumed checkpoint) into
        # this run, re-stamped with the current config and meta so that a resumed run
        # writes the same bytes as an uninterrupted one
        prior = best_path if best_path.exists() else Path(resume).with_name("best.ckpt")
        if prior.exists():
            arrays, header = checkpoint.load(prior)
            header["train"] = asdict(cfg)
            header.update(meta or {})
            checkpoint.save(best_path, arrays, header)
    stopped = False
    while state.epoch < cfg.max_epochs:
        if state.bad_epochs >= cfg.patience:
            stopped = True
            break
        ep = state.epoch
        train_loss = train_epoch(trajs, state, cfg)
        watched = validation_loss(val, state, cfg) if val else train_loss
        if monitor is not None:
            watched = monitor(ep, watched)
        state.history.append(train_loss)
        improved = watched < state.best_loss
        if improved:
            state.best_loss = watched
            state.bad_epochs = 0
        else:
            state.bad_epochs += 1
        log.info("epoch %d train loss %.4f monitored %.4f%s", ep + 1, train_loss, watched,
                 " (best)" if improved else "")
        if out is not None:
            blob = checkpoint.dumps(state.arrays(), {**state.header(cfg), **(meta or {})})
            last_path.write_bytes(blob)
            if improved:
                best_path.write_bytes(blob)
        if state.bad_epochs >= cfg.patience:
            stopped = True
            break
    if best_path is not None and not best_path.exists():
        best_path = None
    return FitResult(state, state.epoch, stopped, best_path, last_path)
