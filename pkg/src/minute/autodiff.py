"""Dense tensors with reverse-mode differentiation on a dynamic tape.

Small by design: exactly the operations the retriever and localizer need,
each with a hand-written backward rule that is checked against central
finite differences in the test suite. Arrays are numpy (float32 in
training, float64 in the verification tests); no broadcasting beyond
what the backward rules explicitly undo.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "set_check_finite",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_rows",
    "gather_rows",
    "mask_fill",
    "relu",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "layer_norm",
    "conv1d_same",
    "max_axis",
    "sum_all",
    "mean_all",
    "cross_entropy_from_logits",
    "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""


_CHECK_FINITE = True


def set_check_finite(enabled: bool) -> None:
    """Toggle the per-op output finiteness check (on by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class Tensor:
    """A dense array plus an optional gradient buffer.

    `requires_grad` marks leaves whose gradient should be accumulated;
    tensors produced by ops inherit it from their parents whenever a
    tape is active.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed differentiable ops.

    Ops append in execution order, which for a dynamically built graph is
    already a topological order; `backward` walks it once in reverse.
    Use as a context manager:

        with Tape() as tape:
            loss = ...
        tape.backward(loss)
    """

    _ACTIVE: Optional["Tape"] = None

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = Tape._ACTIVE
        Tape._ACTIVE = self
        return self

    def __exit__(self, *exc):
        Tape._ACTIVE = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError("loss is not finite")
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue
            parent_grads = backward_fn(g)
            for parent, pg in zip(parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _finalize(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable,
              check_finite: bool = True) -> Tensor:
    """Wrap an op result, registering it on the active tape when tracked."""
    if check_finite and _CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError("op produced non-finite values")
    tape = Tape._ACTIVE
    tracked = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=tracked)
    if tracked:
        tape._nodes.append((out, parents, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finalize(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _finalize(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finalize(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def bwd(g):
        return (g * c,)

    return _finalize(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked leading batch dims (used per head)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _finalize(out, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _finalize(out, (a,), bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _finalize(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finalize(out, tuple(tensors), bwd)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = a.data[start:stop].copy()

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _finalize(out, (a,), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Row lookup (embedding gather); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows needs a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _finalize(out, (a,), bwd)


def mask_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace masked positions with `value` (commonly -inf before softmax).

    The mask is a plain boolean array, not differentiated.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, a.dtype.type(value), a.data)
    except ValueError as e:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {a.shape}") from e
    if out.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast to {a.shape}")

    def bwd(g):
        return (np.where(mask, 0.0, g),)

    return _finalize(out, (a,), bwd, check_finite=False)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0),)

    return _finalize(out, (a,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape == () or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    m = np.max(x.data, axis=axis, keepdims=True)
    # all-masked slices (max == -inf) are an error: softmax would be NaN
    if not np.all(np.isfinite(m)) and np.any(np.isneginf(m)):
        raise NonFiniteError("softmax over fully masked axis")
    e = np.exp(x.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _finalize(out, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape == () or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    m = np.max(x.data, axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def bwd(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _finalize(out, (x,), bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along `axis`; zero vectors map to zero."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    clamped = norm <= eps

    def bwd(g):
        # clamped slices: constant denominator, plain scaling
        dot = np.sum(g * x.data, axis=axis, keepdims=True)
        full = g / denom - x.data * (dot / denom**3)
        return (np.where(clamped, g / denom, full),)

    return _finalize(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        gxhat = g * gain.data
        ggain = _unbroadcast(g * xhat, gain.shape)
        gbias = _unbroadcast(g, bias.shape)
        mean_g = np.mean(gxhat, axis=-1, keepdims=True)
        mean_gx = np.mean(gxhat * xhat, axis=-1, keepdims=True)
        gx = inv * (gxhat - mean_g - xhat * mean_gx)
        return gx, ggain, gbias

    return _finalize(out, (x, gain, bias), bwd)


def conv1d_same(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-length 1-D convolution over rows.

    x: (L, d_in); kernels: (width, d_in, d_out) with odd width; bias: (d_out,).
    Zero padding of (width-1)/2 on both sides preserves L.
    """
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be (width, d_in, d_out), got {kernels.shape}")
    width, d_in, d_out = kernels.shape
    if width % 2 == 0:
        raise ShapeError(f"kernel width must be odd, got {width}")
    if x.ndim != 2 or x.shape[1] != d_in:
        raise ShapeError(f"input {x.shape} does not match kernel d_in {d_in}")
    L = x.shape[0]
    pad = (width - 1) // 2
    xp = np.zeros((L + 2 * pad, d_in), dtype=x.dtype)
    xp[pad:pad + L] = x.data
    out = np.tile(bias.data, (L, 1)).astype(x.dtype)
    for t in range(width):
        out += xp[t:t + L] @ kernels.data[t]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kernels.data)
        for t in range(width):
            gxp[t:t + L] += g @ kernels.data[t].T
            gk[t] = xp[t:t + L].T @ g
        gb = g.sum(axis=0)
        return gxp[pad:pad + L], gk, gb

    return _finalize(out, (x, kernels, bias), bwd)


def max_axis(x: Tensor, axis: int = 0) -> Tensor:
    """Max-pool along one axis; gradient flows to the first argmax."""
    if x.shape[axis] == 0:
        raise ShapeError(f"max over empty axis {axis}")
    out = np.max(x.data, axis=axis)
    arg = np.argmax(x.data, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        idx = list(np.indices(out.shape))
        idx.insert(axis if axis >= 0 else x.ndim + axis, arg)
        gx[tuple(idx)] = g
        return (gx,)

    return _finalize(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data))

    def bwd(g):
        return (np.full_like(x.data, g if np.ndim(g) == 0 else g.item()),)

    return _finalize(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(np.sum(x.data) / n)

    def bwd(g):
        gv = (g if np.ndim(g) == 0 else g.item()) / n
        return (np.full_like(x.data, gv),)

    return _finalize(out, (x,), bwd)


def cross_entropy_from_logits(logits: Tensor, target_index: int) -> Tensor:
    """-log softmax(logits)[target]; gradient is softmax(logits) - onehot."""
    if logits.ndim != 1:
        raise ShapeError(f"logits must be 1-D, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= target_index < n:
        raise IndexError(f"target index {target_index} out of range for {n} logits")
    m = float(np.max(logits.data))
    if math.isinf(m) and m < 0:
        raise NonFiniteError("all logits are -inf")
    z = logits.data - m
    lse = m + np.log(np.sum(np.exp(z)))
    out = np.asarray(lse - logits.data[target_index])

    def bwd(g):
        p = np.exp(logits.data - lse)
        p[target_index] -= 1.0
        return (p * (g if np.ndim(g) == 0 else g.item()),)

    return _finalize(out, (logits,), bwd)


def grad_check(f: Callable[[], Tensor], leaves: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must rebuild the scalar loss from the current contents of `leaves`
    (double precision recommended). Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    zero_grads(leaves)
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise ShapeError("grad_check needs a scalar-valued f")
    tape.backward(loss)
    analytic = [np.zeros_like(l.data) if l.grad is None else l.grad.copy() for l in leaves]
    zero_grads(leaves)

    worst = 0.0
    for leaf, ana in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        aflat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("non-finite value during finite differencing")
            num = (fp - fm) / (2 * eps)
            err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]), abs(num))
            worst = max(worst, err)
    return worst
