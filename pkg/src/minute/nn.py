"""Layers, initializers, and the AdamW optimizer used by both models.

Parameters live in nested dicts of Tensors ("trees"); `flatten_params`
produces the dotted-name ordering that the optimizer and the checkpoint
format share, so parameter iteration order is deterministic everywhere.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    conv1d_same,
    layer_norm,
    mask_fill,
    matmul,
    relu,
    reshape,
    scale,
    slice_rows,
    softmax,
    transpose,
)

DTYPE = np.float32


def flatten_params(tree: dict, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a nested param dict to {'a.b.c': Tensor}, sorted by name."""
    flat: dict[str, Tensor] = {}
    for key in sorted(tree):
        value = tree[key]
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            flat.update(flatten_params(value, name))
        else:
            flat[name] = value
    return flat


def unflatten_params(flat: dict[str, np.ndarray]) -> dict:
    tree: dict = {}
    for name, arr in flat.items():
        node = tree
        parts = name.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = arr if isinstance(arr, Tensor) else Tensor(arr, requires_grad=True)
    return tree


def fan_in_uniform(rng: np.random.Generator, d_in: int, d_out: int) -> Tensor:
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(DTYPE)
    return Tensor(w, requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=True)


def normal_param(rng: np.random.Generator, *shape: int, std: float = 0.02) -> Tensor:
    return Tensor((rng.standard_normal(shape) * std).astype(DTYPE), requires_grad=True)


def init_linear(rng, d_in: int, d_out: int) -> dict:
    return {"w": fan_in_uniform(rng, d_in, d_out), "b": zeros_param(d_out)}


def linear(p: dict, x: Tensor) -> Tensor:
    return add(matmul(x, p["w"]), p["b"])


def init_layer_norm(d: int) -> dict:
    return {"g": ones_param(d), "b": zeros_param(d)}


def apply_layer_norm(p: dict, x: Tensor) -> Tensor:
    return layer_norm(x, p["g"], p["b"])


def init_attention(rng, d: int) -> dict:
    return {
        "wq": init_linear(rng, d, d),
        "wk": init_linear(rng, d, d),
        "wv": init_linear(rng, d, d),
        "wo": init_linear(rng, d, d),
    }


def multi_head_attention(p: dict, queries: Tensor, keys: Tensor, values: Tensor,
                         n_heads: int, key_mask: Optional[np.ndarray] = None,
                         attn_mask: Optional[np.ndarray] = None) -> Tensor:
    """Scaled dot-product attention, heads concatenated then projected.

    queries: (Lq, d); keys/values: (Lk, d). `key_mask` is a bool (Lk,)
    array marking padding keys; `attn_mask` a bool (Lq, Lk) array blocking
    individual pairs (used for block-diagonal batching of independent
    sequences). Masked pairs get exactly zero attention weight.
    """
    d = queries.shape[-1]
    if d % n_heads != 0:
        raise ValueError(f"n_heads {n_heads} must divide model dim {d}")
    dh = d // n_heads
    lq, lk = queries.shape[0], keys.shape[0]
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (lk,):
            raise ValueError(f"key_mask shape {key_mask.shape} != ({lk},)")
    if attn_mask is not None:
        attn_mask = np.asarray(attn_mask, dtype=bool)
        if attn_mask.shape != (lq, lk):
            raise ValueError(f"attn_mask shape {attn_mask.shape} != ({lq}, {lk})")

    def split_heads(x, L):
        return transpose(reshape(x, (L, n_heads, dh)), (1, 0, 2))  # (h, L, dh)

    q = split_heads(linear(p["wq"], queries), lq)
    k = split_heads(linear(p["wk"], keys), lk)
    v = split_heads(linear(p["wv"], values), lk)
    scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))  # (h, lq, lk)
    if key_mask is not None:
        scores = mask_fill(scores, key_mask[None, None, :], -np.inf)
    if attn_mask is not None:
        scores = mask_fill(scores, attn_mask[None, :, :], -np.inf)
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # (h, lq, dh)
    ctx = reshape(transpose(ctx, (1, 0, 2)), (lq, d))
    return linear(p["wo"], ctx)


def init_transformer_layer(rng, d: int, ff_mult: int = 4) -> dict:
    return {
        "attn": init_attention(rng, d),
        "ln1": init_layer_norm(d),
        "ff1": init_linear(rng, d, ff_mult * d),
        "ff2": init_linear(rng, ff_mult * d, d),
        "ln2": init_layer_norm(d),
    }


def transformer_layer(p: dict, x: Tensor, n_heads: int,
                      key_mask: Optional[np.ndarray] = None,
                      attn_mask: Optional[np.ndarray] = None) -> Tensor:
    """Post-norm encoder layer: self-attention then feed-forward."""
    h = multi_head_attention(p["attn"], x, x, x, n_heads, key_mask, attn_mask)
    x = apply_layer_norm(p["ln1"], add(x, h))
    f = linear(p["ff2"], relu(linear(p["ff1"], x)))
    return apply_layer_norm(p["ln2"], add(x, f))


def init_conv1d(rng, width: int, d_in: int, d_out: int) -> dict:
    bound = 1.0 / np.sqrt(width * d_in)
    k = rng.uniform(-bound, bound, size=(width, d_in, d_out)).astype(DTYPE)
    return {"k": Tensor(k, requires_grad=True), "b": zeros_param(d_out)}


def conv1d(p: dict, x: Tensor) -> Tensor:
    return conv1d_same(x, p["k"], p["b"])


def add_position_and_type(x: Tensor, pos_table: Tensor, type_vec: Tensor) -> Tensor:
    """Add positional rows 0..L-1 and a broadcast token-type embedding."""
    L = x.shape[0]
    if L > pos_table.shape[0]:
        raise ValueError(f"sequence length {L} exceeds positional table {pos_table.shape[0]}")
    return add(add(x, slice_rows(pos_table, 0, L)), type_vec)


class AdamW:
    """Decoupled weight decay Adam over a flat name->Tensor parameter map."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self._v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def mean_of(losses: list[Tensor]) -> Tensor:
    """Mean of scalar loss tensors (stacked then averaged, differentiable)."""
    from .autodiff import mean_all

    if len(losses) == 1:
        return losses[0]
    stacked = concat([reshape(l, (1,)) for l in losses], axis=0)
    return mean_all(stacked)


def check_finite_params(flat: dict[str, Tensor], context: str) -> None:
    for name, p in flat.items():
        if not np.all(np.isfinite(p.data)):
            raise FloatingPointError(f"{context}: parameter {name} became non-finite")


__all__ = [
    "DTYPE",
    "flatten_params",
    "unflatten_params",
    "fan_in_uniform",
    "zeros_param",
    "ones_param",
    "normal_param",
    "init_linear",
    "linear",
    "init_layer_norm",
    "apply_layer_norm",
    "init_attention",
    "multi_head_attention",
    "init_transformer_layer",
    "transformer_layer",
    "init_conv1d",
    "conv1d",
    "add_position_and_type",
    "AdamW",
    "mean_of",
    "check_finite_params",
]
