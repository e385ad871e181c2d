"""Reverse-mode automatic differentiation over a closed set of dense ops.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient back to them. ``backward`` walks
the graph once in reverse topological order and then releases it, so a
second ``backward`` on the same loss raises.

Arrays are plain numpy; float32 is the training dtype and float64 is used
for finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_released")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._released = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _send(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; interior gradients are freed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._released:
        raise GraphError("graph already released by a previous backward; run the forward pass again")
    if loss._backward is None:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._backward is not None:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        g = node.grad
        fn = node._backward
        node.grad = None
        node._backward = None
        node._released = True
        if g is not None:
            fn(g)
        node._parents = ()


# ------------------------------------------------------------------ ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _send(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _send(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _result(out, (a, b), bw)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.data.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _send(x, np.transpose(g, inv))

    return _result(np.transpose(x.data, axes), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def bw(g):
        _send(x, g.reshape(x.shape))

    return _result(out, (x,), bw)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        _send(a, _unbroadcast(g, a.shape))
        _send(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting (also scales by a scalar tensor)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _send(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _send(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)

    def bw(g):
        _send(x, g * c)

    return _result(x.data * c, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    nd = xs[0].data.ndim
    ax = axis % nd
    others = {x.shape[:ax] + x.shape[ax + 1:] for x in xs}
    if len(others) != 1 or any(x.data.ndim != nd for x in xs):
        raise ShapeError(f"concat: shapes {[x.shape for x in xs]} differ off axis {axis}")
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * nd
            idx[ax] = slice(lo, hi)
            _send(x, g[tuple(idx)])

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, bw)


def concat_last_dim(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=-1)


def softmax_last_dim(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis after adding ``mask`` (0 or -inf entries)."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        try:
            z = z + np.asarray(mask, dtype=z.dtype)
        except ValueError:
            raise ShapeError(f"softmax_last_dim: mask shape {np.shape(mask)} vs input {x.shape}") from None
    zmax = z.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(zmax)):
        raise ValueError("softmax_last_dim: a row is fully masked")
    e = np.exp(z - zmax)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _send(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization over the last axis followed by ``gain * . + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        if gain.requires_grad:
            _send(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _send(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _send(x, gx)

    return _result(out, (x, gain, bias), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    keep = x.data > 0

    def bw(g):
        _send(x, g * keep)

    return _result(np.where(keep, x.data, 0).astype(x.data.dtype), (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: identity in eval mode, kept units scaled by 1/(1-rate)."""
    x = as_tensor(x)
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(x.shape) >= rate
    m = keep.astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)

    def bw(g):
        _send(x, g * m)

    return _result(x.data * m, (x,), bw)


def mean_pool_rows(x: Tensor, valid: np.ndarray) -> Tensor:
    """Average of the valid rows: (B, l, d) with (B, l) booleans -> (B, d)."""
    x = as_tensor(x)
    valid = np.asarray(valid, dtype=bool)
    if x.data.ndim != 3 or valid.shape != x.shape[:2]:
        raise ShapeError(f"mean_pool_rows: input {x.shape} vs mask {valid.shape}")
    counts = valid.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ValueError("mean_pool_rows: a sequence has no valid rows")
    w = (valid / counts).astype(x.data.dtype)[:, :, None]

    def bw(g):
        _send(x, g[:, None, :] * w)

    return _result((x.data * w).sum(axis=1), (x,), bw)


def abs_(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)

    def bw(g):
        _send(x, g * sgn)

    return _result(np.abs(x.data), (x,), bw)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise L1 distance over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    sgn = np.sign(diff)

    def bw(g):
        gg = g[..., None] * sgn
        _send(a, gg)
        _send(b, -gg)

    return _result(np.abs(diff).sum(axis=-1), (a, b), bw)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise ValueError("l2_normalize_rows: zero-norm vector")
    y = x.data / norm

    def bw(g):
        _send(x, (g - y * (g * y).sum(axis=-1, keepdims=True)) / norm)

    return _result(y, (x,), bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two equally shaped (..., d) tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    return sum_(mul(l2_normalize_rows(a), l2_normalize_rows(b)), axis=-1)


def logsumexp_last_dim(x: Tensor) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (np.log(s) + m)[..., 0]
    p = e / s

    def bw(g):
        _send(x, g[..., None] * p)

    return _result(out, (x,), bw)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            _send(x, np.broadcast_to(g, x.shape))
        else:
            _send(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / n)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the first axis; repeated indices accumulate gradient."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _send(x, full)

    return _result(x.data[idx], (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)
