"""Vision-language fusion: visual tokens cross-attend into keyword embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import MhaParams, init_mha, multi_head_attention
from .params import gaussian, ones, zeros
from .rng import Rng
from .tensor import Tensor


@dataclass
class FusionLayerParams:
    mha: MhaParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_h: Tensor   # (d_model, d_ff)
    b_h: Tensor
    w_r: Tensor   # (d_ff, d_model); unrelated to the pooling weights of the GCA block
    b_r: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class TransFusionParams:
    w_in: Tensor  # (C, d_model) visual-token projection
    b_in: Tensor
    layers: list[FusionLayerParams]


@dataclass
class FusedFeatures:
    F_prime: Tensor        # (..., H*W, d_model)
    alignment: Tensor      # (..., H*W, n) head-averaged weights of the last layer


def init_transfusion(rng: Rng, channels: int, d_model: int, heads: int, d_ff: int,
                     layers: int = 1, dtype=np.float32) -> TransFusionParams:
    blocks = []
    for _ in range(layers):
        blocks.append(FusionLayerParams(
            mha=init_mha(rng, d_model, heads, dtype),
            ln1_gain=ones((d_model,), dtype), ln1_bias=zeros((d_model,), dtype),
            w_h=gaussian(rng, (d_model, d_ff), fan_in=d_model, dtype=dtype), b_h=zeros((d_ff,), dtype),
            w_r=gaussian(rng, (d_ff, d_model), fan_in=d_ff, dtype=dtype), b_r=zeros((d_model,), dtype),
            ln2_gain=ones((d_model,), dtype), ln2_bias=zeros((d_model,), dtype),
        ))
    return TransFusionParams(
        w_in=gaussian(rng, (channels, d_model), fan_in=channels, dtype=dtype),
        b_in=zeros((d_model,), dtype),
        layers=blocks,
    )


def visual_queries(F_gca: Tensor, params: TransFusionParams) -> Tensor:
    """Flatten (..., H, W, C) to H*W tokens and project to d_model."""
    *lead, h, w, c = F_gca.shape
    tokens = T.reshape(F_gca, (*lead, h * w, c))
    return T.matmul(tokens, params.w_in) + params.b_in


def _cross_attend(q: Tensor, KE_final: Tensor, layer: FusionLayerParams, kw_pad) -> tuple[Tensor, Tensor]:
    return multi_head_attention(q, KE_final, layer.mha, key_pad=kw_pad)


def vla_cross_attention(F_gca: Tensor, KE_final: Tensor, params: TransFusionParams,
                        kw_pad=None) -> tuple[Tensor, Tensor]:
    """Z = MHA(visual queries, KE_final, KE_final) for the first fusion layer."""
    q = visual_queries(F_gca, params)
    return _cross_attend(q, KE_final, params.layers[0], _default_pad(KE_final, kw_pad))


def _default_pad(KE_final: Tensor, kw_pad):
    if kw_pad is None:
        return np.zeros(KE_final.shape[:-1], dtype=bool)
    return np.asarray(kw_pad, dtype=bool)


def fusion_layer(q: Tensor, KE_final: Tensor, layer: FusionLayerParams, kw_pad,
                 eps: float = 1e-9) -> tuple[Tensor, Tensor]:
    """A = LN(q + Z); F' = LN(W_r relu(W_h A) + A)."""
    Z, alignment = _cross_attend(q, KE_final, layer, kw_pad)
    A = T.layer_norm(q + Z, layer.ln1_gain, layer.ln1_bias, eps=eps)
    ffn = T.matmul(T.relu(T.matmul(A, layer.w_h) + layer.b_h), layer.w_r) + layer.b_r
    return T.layer_norm(ffn + A, layer.ln2_gain, layer.ln2_bias, eps=eps), alignment


def transfusion_forward(F_gca: Tensor, KE_final: Tensor, params: TransFusionParams,
                        kw_pad=None, eps: float = 1e-9) -> FusedFeatures:
    kw_pad = _default_pad(KE_final, kw_pad)
    x = visual_queries(F_gca, params)
    alignment = None
    for layer in params.layers:
        x, alignment = fusion_layer(x, KE_final, layer, kw_pad, eps=eps)
    return FusedFeatures(x, alignment)
