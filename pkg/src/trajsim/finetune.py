"""Fine-tuning a pretrained encoder to approximate a heuristic measure.

A two-layer MLP head (width d -> d -> 1) reads the symmetric pair feature
``|h_i - h_j|`` and regresses the normalized similarity
``exp(-dist / alpha)``, where ``alpha`` is the mean heuristic distance over
the training pairs. Either the last encoder layer plus the head is trained
(``scope="last_layer"``) or every encoder weight plus the head (``"all"``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import Tensor
from .encoder import Encoder, encode, _xavier
from .evaluate import hr_at_k, l1_matrix, r_a_at_b, rankings_from_scores
from .geo import Trajectory
from .measures import KINDS, MeasureKind, pairwise_matrix
from .optim import AdamState, adam_step, zero_grad

log = logging.getLogger(__name__)

SCOPES = ("last_layer", "all")


class FinetuneError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneConfig:
    target: str = "hausdorff"
    scope: str = "last_layer"
    epochs: int = 60
    lr: float = 0.002
    head_warmup: int = 300
    seed: int = 0
    pairs_per_anchor: int = 20
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    edr_epsilon: float = 100.0
    chunk: int = 64

    def __post_init__(self):
        if self.target not in KINDS:
            raise FinetuneError(f"unknown target measure {self.target!r}; expected one of {KINDS}")
        if self.scope not in SCOPES:
            raise FinetuneError(f"unknown scope {self.scope!r}; expected one of {SCOPES}")
        if self.epochs < 1 or self.pairs_per_anchor < 1 or self.chunk < 1 or self.head_warmup < 0:
            raise FinetuneError("epochs, pairs_per_anchor and chunk must be positive")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or not math.isclose(sum(self.split), 1.0):
            raise FinetuneError("split must be three non-negative fractions summing to 1")

    @property
    def measure(self) -> MeasureKind:
        return MeasureKind(self.target, edr_epsilon=self.edr_epsilon)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d


# -------------------------------------------------------------- data prep


def split_dataset(trajs: Sequence[Trajectory], fractions=(0.7, 0.1, 0.2),
                  rng: np.random.Generator | None = None) -> tuple[list, list, list]:
    rng = rng if rng is not None else np.random.default_rng(0)
    order = rng.permutation(len(trajs))
    n_tr = int(round(fractions[0] * len(trajs)))
    n_va = int(round(fractions[1] * len(trajs)))
    pick = lambda ix: [trajs[i] for i in ix]  # noqa: E731
    return pick(order[:n_tr]), pick(order[n_tr:n_tr + n_va]), pick(order[n_tr + n_va:])


def stratified_pairs(dist: np.ndarray, per_anchor: int, rng: np.random.Generator) -> np.ndarray:
    """(P, 2) index pairs: for every anchor, partners drawn evenly from the
    ten distance deciles of the other trajectories."""
    n = len(dist)
    if n < 2:
        raise FinetuneError("need at least two trajectories to form pairs")
    quota = np.full(10, per_anchor // 10)
    quota[: per_anchor % 10] += 1
    out = []
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        ranked = others[np.lexsort((others, dist[i, others]))]
        for q, decile in zip(quota, np.array_split(ranked, 10)):
            if q == 0 or len(decile) == 0:
                continue
            take = rng.choice(decile, size=min(q, len(decile)), replace=False)
            out.extend((i, int(j)) for j in np.sort(take))
    return np.array(out, dtype=np.int64)


def normalize_labels(d: np.ndarray, alpha: float) -> np.ndarray:
    """Similarity ``exp(-d / alpha)``; distance 0 maps to 1."""
    return np.exp(-np.asarray(d, dtype=np.float64) / alpha)


def fit_alpha(d: np.ndarray) -> float:
    d = np.asarray(d, dtype=np.float64)
    if d.size == 0 or not np.all(np.isfinite(d)):
        raise FinetuneError("heuristic distances must be finite")
    if np.ptp(d) == 0:
        raise FinetuneError("degenerate labels: every training pair has the same distance")
    alpha = float(d.mean())
    if alpha <= 0:
        raise FinetuneError("mean training distance must be positive")
    return alpha


# ------------------------------------------------------------------ model


def init_head(d: int, rng: np.random.Generator, dtype, bias: float = 0.0) -> dict[str, Tensor]:
    """Xavier weights; the output starts near ``bias`` (the mean label) so
    early steps fit the label spread rather than its offset."""
    return {
        "head.w1": Tensor(_xavier(rng, d, d, dtype), requires_grad=True),
        "head.b1": Tensor(np.zeros(d, dtype), requires_grad=True),
        "head.w2": Tensor(0.1 * _xavier(rng, d, 1, dtype), requires_grad=True),
        "head.b2": Tensor(np.full(1, bias, dtype), requires_grad=True),
    }


def head_forward(hi: Tensor, hj: Tensor, head: dict[str, Tensor]) -> Tensor:
    """Predicted similarity per pair, shape (P,)."""
    x = ag.abs_(ag.sub(hi, hj))
    hid = ag.relu(ag.linear(x, head["head.w1"], head["head.b1"]))
    out = ag.linear(hid, head["head.w2"], head["head.b2"])
    return ag.reshape(out, (out.shape[0],))


def scoped_names(encoder: Encoder, scope: str) -> list[str]:
    """Encoder params trained under ``scope`` (the projection head never is:
    fine-tuning reads ``h`` directly)."""
    if scope == "all":
        return [k for k in encoder.params if not k.startswith("proj.")]
    last = encoder.cfg.n_layers - 1
    return [k for k in encoder.params if k.startswith(f"layer{last}.")]


def encode_many(encoder: Encoder, params: dict[str, Tensor], trajs: Sequence[Trajectory],
                chunk: int = 64) -> Tensor:
    """``h`` for every trajectory as one (n, d) graph node, in input order.

    Trajectories are batched by length to keep padding small.
    """
    order = sorted(range(len(trajs)), key=lambda i: (len(trajs[i]), i))
    parts = []
    for s in range(0, len(order), chunk):
        idx = order[s:s + chunk]
        h, _ = encode(encoder.batch([trajs[i] for i in idx]), params, encoder.cfg)
        parts.append(h)
    stacked = ag.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    inverse = np.empty(len(order), dtype=np.int64)
    inverse[np.array(order)] = np.arange(len(order))
    return ag.take_rows(stacked, inverse)


@dataclass
class FinetunedModel:
    encoder: Encoder
    head: dict[str, Tensor]
    alpha: float
    cfg: FinetuneConfig
    history: list[float] = field(default_factory=list)

    def embed(self, trajs: Sequence[Trajectory]) -> np.ndarray:
        return self.encoder.embed(trajs)

    def similarity(self, ha: np.ndarray, hb: np.ndarray) -> np.ndarray:
        """(len(ha), len(hb)) predicted similarities from precomputed embeddings."""
        out = np.empty((len(ha), len(hb)))
        with ag.no_grad():
            for i in range(len(ha)):
                rep = np.repeat(ha[i:i + 1], len(hb), axis=0)
                out[i] = head_forward(Tensor(rep), Tensor(hb), self.head).data
        return out

    def header(self) -> dict:
        h = self.encoder.header()
        h.update({"kind": "finetuned", "finetune": self.cfg.to_dict(), "alpha": self.alpha,
                  "label_normalization": "exp(-d/alpha)", "history": self.history})
        return h

    def save(self, path) -> None:
        arrays = self.encoder.arrays()
        arrays.update({k: v.data for k, v in self.head.items()})
        checkpoint.save(path, arrays, self.header())

    @classmethod
    def load(cls, path) -> FinetunedModel:
        arrays, header = checkpoint.load(path)
        if header.get("kind") != "finetuned":
            raise checkpoint.CheckpointError(f"{path} is not a fine-tuned model")
        enc = Encoder.from_arrays(arrays, header)
        cfg_d = dict(header["finetune"])
        cfg_d["split"] = tuple(cfg_d["split"])
        head = {k: Tensor(v.astype(enc.cfg.np_dtype), requires_grad=True)
                for k, v in arrays.items() if k.startswith("head.")}
        return cls(enc, head, float(header["alpha"]), FinetuneConfig(**cfg_d), list(header["history"]))


@dataclass
class PairSet:
    trajs: list[Trajectory]
    pairs: np.ndarray
    dist: np.ndarray

    def labels(self, alpha: float) -> np.ndarray:
        return normalize_labels(self.dist[self.pairs[:, 0], self.pairs[:, 1]], alpha)


def make_pairs(trajs: Sequence[Trajectory], cfg: FinetuneConfig, rng: np.random.Generator) -> PairSet:
    dist = pairwise_matrix(trajs, trajs, cfg.measure)
    per = min(cfg.pairs_per_anchor, len(trajs) - 1)
    return PairSet(list(trajs), stratified_pairs(dist, per, rng), dist)


def _pair_mse(encoder: Encoder, params, head, ps: PairSet, y: np.ndarray, chunk: int) -> Tensor:
    H = encode_many(encoder, params, ps.trajs, chunk)
    pred = head_forward(ag.take_rows(H, ps.pairs[:, 0]), ag.take_rows(H, ps.pairs[:, 1]), head)
    err = ag.sub(pred, Tensor(y.astype(pred.dtype)))
    return ag.mean(ag.mul(err, err))


def _warm_head(encoder: Encoder, head: dict[str, Tensor], ps: PairSet, y: np.ndarray,
               steps: int, lr: float) -> None:
    """Fit the head alone on frozen embeddings (cheap: ``h`` is computed once)."""
    if steps == 0:
        return
    h = encoder.embed(ps.trajs)
    hi, hj = Tensor(h[ps.pairs[:, 0]]), Tensor(h[ps.pairs[:, 1]])
    target = Tensor(y.astype(h.dtype))
    adam = AdamState()
    for _ in range(steps):
        zero_grad(head)
        err = ag.sub(head_forward(hi, hj, head), target)
        ag.mean(ag.mul(err, err)).backward()
        adam_step(head, adam, lr)


def finetune(encoder: Encoder, train: PairSet, cfg: FinetuneConfig,
             val: PairSet | None = None) -> FinetunedModel:
    """MSE regression of normalized similarities on ``train`` pairs.

    The head is first fitted on frozen embeddings for ``head_warmup`` steps,
    then the scoped encoder weights and the head are trained jointly with one
    full-batch step per epoch. The input encoder is not modified. With ``val``
    the returned weights are those of the epoch with the lowest validation MSE.
    """
    d_train = train.dist[train.pairs[:, 0], train.pairs[:, 1]]
    alpha = fit_alpha(d_train)
    y = normalize_labels(d_train, alpha)
    rng = np.random.default_rng([cfg.seed, 0xF7])
    trainable = set(scoped_names(encoder, cfg.scope))
    params = {k: Tensor(v.data.copy(), requires_grad=k in trainable) for k, v in encoder.params.items()}
    head = init_head(encoder.cfg.d_t, rng, encoder.cfg.np_dtype, float(y.mean()))
    _warm_head(encoder, head, train, y, cfg.head_warmup, cfg.lr)
    opt_params = {**{k: params[k] for k in sorted(trainable)}, **head}
    adam = AdamState()
    y_val = val.labels(alpha) if val is not None else None
    best, best_snapshot = math.inf, None
    history = []
    for ep in range(cfg.epochs):
        zero_grad(opt_params)
        loss = _pair_mse(encoder, params, head, train, y, cfg.chunk)
        loss.backward()
        adam_step(opt_params, adam, cfg.lr)
        history.append(float(loss.data))
        if val is not None:
            with ag.no_grad():
                v = float(_pair_mse(encoder, params, head, val, y_val, cfg.chunk).data)
            if v < best:
                best = v
                best_snapshot = {k: t.data.copy() for k, t in opt_params.items()}
            log.info("finetune epoch %d train mse %.5f val mse %.5f", ep + 1, history[-1], v)
        else:
            log.info("finetune epoch %d train mse %.5f", ep + 1, history[-1])
    if best_snapshot is not None:
        for k, a in best_snapshot.items():
            opt_params[k].data = a
    out_params = {k: Tensor(t.data, requires_grad=True) for k, t in params.items()}
    tuned = Encoder(encoder.cfg, out_params, encoder.table, encoder.norm)
    return FinetunedModel(tuned, head, alpha, cfg, history)


def training_mse(model: FinetunedModel, ps: PairSet) -> float:
    with ag.no_grad():
        y = ps.labels(model.alpha)
        return float(_pair_mse(model.encoder, model.encoder.params, model.head, ps, y, model.cfg.chunk).data)


# -------------------------------------------------------------- evaluation


def _true_rankings(dist: np.ndarray, ids: list[str]) -> list[list[str]]:
    out = []
    for i, row in enumerate(rankings_from_scores(dist, ids)):
        out.append([c for c in row if c != ids[i]])
    return out


def _pred_rankings(scores: np.ndarray, ids: list[str], descending: bool) -> list[list[str]]:
    out = []
    for i, row in enumerate(rankings_from_scores(scores, ids, descending=descending)):
        out.append([c for c in row if c != ids[i]])
    return out


def ranking_scores(test: Sequence[Trajectory], dist: np.ndarray, pred: list[list[str]],
                   ks: Sequence[int] = (5, 20)) -> dict:
    ids = [t.id for t in test]
    true = _true_rankings(dist, ids)
    out = {f"hr@{k}": float(np.mean([hr_at_k(p, t, k) for p, t in zip(pred, true)])) for k in ks}
    if len(ids) - 1 >= 20:
        out["r5@20"] = float(np.mean([r_a_at_b(p, t, 5, 20) for p, t in zip(pred, true)]))
    return out


def evaluate_pretrained(encoder: Encoder, test: Sequence[Trajectory], dist: np.ndarray,
                        ks: Sequence[int] = (5, 20)) -> dict:
    """Rank test-set partners by L1 embedding distance."""
    h = encoder.embed(test)
    ids = [t.id for t in test]
    return ranking_scores(test, dist, _pred_rankings(l1_matrix(h, h), ids, False), ks)


def evaluate_finetuned(model: FinetunedModel, test: Sequence[Trajectory], dist: np.ndarray,
                       ks: Sequence[int] = (5, 20)) -> dict:
    """Rank test-set partners by predicted similarity (descending)."""
    h = model.embed(test)
    ids = [t.id for t in test]
    return ranking_scores(test, dist, _pred_rankings(model.similarity(h, h), ids, True), ks)
