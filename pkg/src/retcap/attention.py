"""Scaled dot-product and multi-head attention with additive masking."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import gaussian
from .rng import Rng
from .tensor import ContractError, Tensor

MASK_VALUE = -1e9


@dataclass
class MhaParams:
    """Head ``i`` owns columns ``i*d_k:(i+1)*d_k`` of w_q, w_k, w_v."""

    w_q: Tensor  # (d_model, h*d_k)
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # (h*d_k, d_model)
    heads: int

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1] // self.heads

    @property
    def d_model(self) -> int:
        return self.w_o.shape[1]


def init_mha(rng: Rng, d_model: int, heads: int, dtype=np.float32) -> MhaParams:
    if d_model % heads:
        raise ValueError(f"d_model {d_model} is not divisible by {heads} heads")
    g = lambda: gaussian(rng, (d_model, d_model), fan_in=d_model, dtype=dtype)  # noqa: E731
    return MhaParams(g(), g(), g(), g(), heads)


def padding_mask(key_pad: np.ndarray) -> np.ndarray:
    """Additive mask (..., 1, n_k) from a boolean PAD indicator (True = PAD)."""
    key_pad = np.asarray(key_pad, dtype=bool)
    if key_pad.shape[-1] == 0 or key_pad.all(axis=-1).any():
        raise ContractError("attention row has every key position masked")
    return np.where(key_pad, MASK_VALUE, 0.0)[..., None, :]


def causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k) + mask) v; returns output and weights."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise T.ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    scores = T.scale(T.matmul(q, T.transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + Tensor(mask, dtype=q.dtype)
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v), weights


def self_attention(Q: Tensor, K: Tensor, V: Tensor, mask=None) -> Tensor:
    """Single-head attention; ``mask`` is a boolean PAD indicator over keys."""
    add = None if mask is None else padding_mask(mask)
    return scaled_dot_attention(Q, K, V, add)[0]


def _swap_last(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 2)) + (ndim - 1, ndim - 2)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    L = len(lead)
    return T.transpose(x, tuple(range(L)) + (L + 1, L, L + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    L = len(lead)
    x = T.transpose(x, tuple(range(L)) + (L + 1, L, L + 2))
    return T.reshape(x, (*lead, n, h * dk))


def multi_head_attention(x_q: Tensor, x_kv: Tensor, params: MhaParams, key_pad=None,
                         causal: bool = False) -> tuple[Tensor, Tensor]:
    """Project, attend per head, concatenate, project out.

    Returns ``(output, weights)`` where weights are averaged over heads,
    shape ``(..., n_q, n_k)``.
    """
    n_q, n_k = x_q.shape[-2], x_kv.shape[-2]
    mask = None
    if key_pad is not None:
        mask = padding_mask(key_pad)[..., None, :, :]  # broadcast over heads
    if causal:
        if n_q != n_k:
            raise ContractError("causal attention needs equal query and key lengths")
        mask = causal_mask(n_q) if mask is None else mask + causal_mask(n_q)
    q = _split_heads(T.matmul(x_q, params.w_q), params.heads)
    k = _split_heads(T.matmul(x_kv, params.w_k), params.heads)
    v = _split_heads(T.matmul(x_kv, params.w_v), params.heads)
    heads_out, weights = scaled_dot_attention(q, k, v, mask)
    out = T.matmul(_merge_heads(heads_out), params.w_o)
    return out, T.mean(weights, axis=-3)
