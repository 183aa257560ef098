"""Dense tensors with reverse-mode autodiff.

Small tape-based engine over numpy arrays: enough to train router probes
and low-rank adapters through a frozen transformer. Ops build a graph only
when some input requires grad (and grad mode is on), so pure inference on
frozen weights runs as plain numpy with no tape overhead.

Conventions:
  - float32 by default; build tensors as float64 for gradient checks.
  - gradient accumulation is additive; call ``zero_grad`` between passes.
  - tensors that participate in a graph must not be mutated in place.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import MaskError, ShapeError, VocabularyError

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode sweep from this node; grads add into ``.grad``."""
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.accumulate_grad(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Thin operator sugar; the op functions below are the real surface.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Optional[Callable]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    data = x.data * np.asarray(s, dtype=x.dtype)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * np.asarray(s, dtype=x.dtype))

    return _make(data, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for rank (2,2), (3,2) and (3,3) operand pairs.

    A rank-2 right operand broadcasts over the single batch dimension of a
    rank-3 left operand. Anything wider is out of contract.
    """
    ra, rb = a.ndim, b.ndim
    if (ra, rb) not in ((2, 2), (3, 2), (3, 3)):
        raise ShapeError(f"matmul supports rank (2,2), (3,2), (3,3); got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if (ra, rb) == (3, 3) and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            if rb == 2:
                a.accumulate_grad(g @ b.data.T)
            else:
                a.accumulate_grad(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            if (ra, rb) == (2, 2):
                b.accumulate_grad(a.data.T @ g)
            elif (ra, rb) == (3, 2):
                b.accumulate_grad(np.tensordot(a.data, g, axes=([0, 1], [0, 1])))
            else:
                b.accumulate_grad(a.data.transpose(0, 2, 1) @ g)

    return _make(data, (a, b), backward)


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign so exp never sees a large positive argument.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * out * (1.0 - out))

    return _make(out, (x,), backward)


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Row-stabilized softmax over the last axis.

    ``mask`` (array-like, nonzero = keep) is broadcast against ``x``; masked
    entries are pushed to -inf-like before normalization and come out as
    exact zeros. A fully masked row raises ``MaskError``.
    """
    d = x.data
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
        keep = np.broadcast_to(m != 0, d.shape)
        if not keep.any(axis=-1).all():
            raise MaskError("softmax row with every entry masked")
        d = np.where(keep, d, np.array(-1e9, dtype=d.dtype))
    shifted = d - d.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * out).sum(axis=-1, keepdims=True)
            x.accumulate_grad(out * (g - inner))

    return _make(out, (x,), backward)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise ShapeError(f"mean over empty axis {axis} of shape {x.shape}")
    data = x.data.mean(axis=axis)

    def backward(g):
        if x.requires_grad:
            ge = np.expand_dims(g, axis) / np.asarray(n, dtype=x.dtype)
            x.accumulate_grad(np.broadcast_to(ge, x.shape).copy())

    return _make(data, (x,), backward)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    data = x.data.sum(axis=axis)

    def backward(g):
        if x.requires_grad:
            ge = np.expand_dims(g, axis)
            x.accumulate_grad(np.broadcast_to(ge, x.shape).copy())

    return _make(data, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    data = x.data.transpose(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inv))

    return _make(data, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return _make(data, (x,), backward)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if not xs:
        raise ShapeError("concat of zero tensors")
    data = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _make(data, tuple(xs), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather; backward scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise VocabularyError(
            f"token id out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[1]))
            table.accumulate_grad(acc)

    return _make(data, (table,), backward)


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-5) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    d = x.data
    n = d.shape[-1]
    ms = (d * d).mean(axis=-1, keepdims=True)
    r = np.sqrt(ms + np.asarray(eps, dtype=d.dtype))
    normed = d / r
    data = normed * gain.data

    def backward(g):
        gy = g * gain.data
        if x.requires_grad:
            inner = (gy * d).sum(axis=-1, keepdims=True)
            x.accumulate_grad(gy / r - d * inner / (n * r**3))
        if gain.requires_grad:
            gg = (g * normed).reshape(-1, n).sum(axis=0)
            gain.accumulate_grad(gg.astype(gain.dtype))

    return _make(data, (x, gain), backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of the last axis by per-position angles.

    ``cos``/``sin`` have shape (n, last/2) and broadcast over leading axes.
    Backward applies the inverse rotation to the incoming gradient.
    """
    d = x.data
    if d.shape[-1] % 2 != 0:
        raise ShapeError(f"rope needs an even last axis, got {x.shape}")
    x1 = d[..., 0::2]
    x2 = d[..., 1::2]
    out = np.empty_like(d)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def backward(g):
        if x.requires_grad:
            g1 = g[..., 0::2]
            g2 = g[..., 1::2]
            gx = np.empty_like(g)
            gx[..., 0::2] = g1 * cos + g2 * sin
            gx[..., 1::2] = -g1 * sin + g2 * cos
            x.accumulate_grad(gx)

    return _make(out, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood over unmasked positions.

    ``logits`` is (..., V), ``targets`` matches the leading shape, and
    ``ignore_mask`` (same leading shape, nonzero = excluded) drops prompt
    and pad positions from the mean. Log-sum-exp stabilized.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} != logits leading shape {logits.shape[:-1]}")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise VocabularyError(f"target id out of range [0, {v}): max={targets.max()}")

    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    if ignore_mask is not None:
        m = np.asarray(ignore_mask.data if isinstance(ignore_mask, Tensor) else ignore_mask)
        keep = (m == 0).reshape(-1)
    else:
        keep = np.ones(tflat.shape[0], dtype=bool)
    n_kept = int(keep.sum())
    if n_kept == 0:
        raise MaskError("cross entropy with every position masked")

    mx = flat.max(axis=-1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(flat - mx).sum(axis=-1))
    nll = lse - flat[np.arange(tflat.shape[0]), tflat]
    data = np.asarray((nll * keep).sum() / n_kept, dtype=logits.dtype)

    def backward(g):
        if logits.requires_grad:
            probs = np.exp(flat - lse[:, None])
            probs[np.arange(tflat.shape[0]), tflat] -= 1.0
            probs *= (keep / n_kept)[:, None]
            logits.accumulate_grad((g * probs).reshape(logits.shape).astype(logits.dtype))

    return _make(data, (logits,), backward)


def parameters_norm_sq(params: Iterable[Tensor]) -> Tensor:
    """Sum of squared entries across tensors (l2 regularizer term)."""
    total = None
    for p in params:
        flat = reshape(p, (p.size,))
        term = sum_axis(mul(flat, flat), 0)
        total = term if total is None else add(total, term)
    if total is None:
        raise ShapeError("norm of an empty parameter list")
    return total
