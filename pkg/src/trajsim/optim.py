"""Adam optimizer and the step-wise learning-rate schedule used in training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, a in self.m.items():
            out[f"adam.m.{k}"] = a
        for k, a in self.v.items():
            out[f"adam.v.{k}"] = a
        return out


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every param that has a gradient.

    Params without ``.grad`` are left alone (their moments are not advanced).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match param {name} {p.shape}")
        dt = p.data.dtype
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = np.asarray(b1 * m + (1.0 - b1) * g, dtype=dt)
        v = np.asarray(b2 * v + (1.0 - b2) * (g * g), dtype=dt)
        state.m[name] = m
        state.v[name] = v
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = np.asarray(p.data - upd, dtype=dt)


def step_decay_lr(base_lr: float, epoch: int, every: int = 5, factor: float = 0.5) -> float:
    """Learning rate for a 0-based ``epoch``: halved after every ``every`` epochs."""
    return base_lr * factor ** (epoch // every)


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
