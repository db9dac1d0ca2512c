"""Vision encoder: conv stem and the Guided Context Attention block.

All block functions accept feature maps shaped ``(..., H, W, C)`` so the
same code runs on one sample or a batch.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ConfigError, stem_output_size
from .params import gaussian, ones, zeros
from .rng import Rng
from .tensor import Tensor


@dataclass
class ConvStemParams:
    weights: list[Tensor]
    biases: list[Tensor]


@dataclass
class GcaParams:
    w_r: Tensor      # (C, 1) pooling logits
    w_1: Tensor      # (C, C/r)
    ln_gain: Tensor  # (C/r,)
    ln_bias: Tensor  # (C/r,)
    w_2: Tensor      # (C/r, C)
    w_qc: Tensor     # (C, C_att)
    w_kc: Tensor     # (C, C_att)
    b_qk: Tensor     # (C_att,)
    w_psi: Tensor    # (C_att, 1)
    b_psi: Tensor    # (1,)

    @property
    def channels(self) -> int:
        return self.w_r.shape[0]


@dataclass
class GateMap:
    values: np.ndarray
    sample_id: str = ""
    checkpoint_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"gate map must be 2-D (H, W), got shape {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("gate values must lie in [0, 1]")


def init_conv_stem(rng: Rng, channels: list[int], in_channels: int = 3, dtype=np.float32) -> ConvStemParams:
    weights, biases = [], []
    c_in = in_channels
    for c_out in channels:
        weights.append(gaussian(rng, (3, 3, c_in, c_out), fan_in=9 * c_in, dtype=dtype))
        biases.append(zeros((c_out,), dtype))
        c_in = c_out
    return ConvStemParams(weights, biases)


def conv_stem_forward(image: Tensor, params: ConvStemParams, image_size: int | None = None) -> Tensor:
    """Stride-2 3x3 conv + ReLU layers: (..., S, S, 3) -> (..., S/2^k, S/2^k, C)."""
    if image.ndim not in (3, 4) or image.shape[-1] != params.weights[0].shape[2]:
        raise ConfigError(f"stem expects (H, W, {params.weights[0].shape[2]}) images, got {image.shape}")
    if image_size is not None and image.shape[-3:-1] != (image_size, image_size):
        raise ConfigError(f"stem configured for {image_size}x{image_size} images, got {image.shape}")
    single = image.ndim == 3
    x = T.reshape(image, (1,) + image.shape) if single else image
    for w, b in zip(params.weights, params.biases):
        x = T.relu(T.conv2d(x, w, b, stride=2, padding=1))
    return T.reshape(x, x.shape[1:]) if single else x


def stem_output_shape(image_size: int, channels: list[int]) -> tuple[int, int, int]:
    s = stem_output_size(image_size, len(channels))
    return (s, s, channels[-1])


def init_gca(rng: Rng, channels: int, reduction: int = 4, c_att: int | None = None, dtype=np.float32) -> GcaParams:
    mid = channels // reduction
    if mid < 1:
        raise ConfigError(f"bottleneck width {channels}/{reduction} is below 1")
    c_att = c_att or max(1, channels // 2)
    g = lambda shape: gaussian(rng, shape, fan_in=shape[0], dtype=dtype)  # noqa: E731
    return GcaParams(
        w_r=g((channels, 1)),
        w_1=g((channels, mid)),
        ln_gain=ones((mid,), dtype),
        ln_bias=zeros((mid,), dtype),
        w_2=g((mid, channels)),
        w_qc=g((channels, c_att)),
        w_kc=g((channels, c_att)),
        b_qk=zeros((c_att,), dtype),
        w_psi=g((c_att, 1)),
        b_psi=zeros((1,), dtype),
    )


def _tokens(fmap: Tensor) -> Tensor:
    *lead, h, w, c = fmap.shape
    return T.reshape(fmap, (*lead, h * w, c))


def pooling_weights(F_R: Tensor, w_r: Tensor) -> Tensor:
    """Softmax over all H*W positions of the per-position logit ``f . w_r``."""
    return T.softmax(T.matmul(_tokens(F_R), w_r), axis=-2)


def spatial_context(F_R: Tensor, w_r: Tensor) -> Tensor:
    """Global attention pooling: (..., H, W, C) -> (..., C)."""
    alpha = pooling_weights(F_R, w_r)
    return T.sum(alpha * _tokens(F_R), axis=-2)


def channel_context(F_R: Tensor, F_s: Tensor, params: GcaParams, eps: float = 1e-9) -> Tensor:
    """Broadcast-add the bottleneck transform of ``F_s`` to every position."""
    hidden = T.relu(T.matmul(T.reshape(F_s, F_s.shape[:-1] + (1, F_s.shape[-1])), params.w_1))
    t = T.matmul(T.layer_norm(hidden, params.ln_gain, params.ln_bias, eps=eps), params.w_2)
    t = T.reshape(t, F_s.shape[:-1] + (1, 1, F_s.shape[-1]))
    return F_R + t


def guided_gate(Q_c: Tensor, K_c: Tensor, V_c: Tensor, params: GcaParams) -> tuple[Tensor, Tensor]:
    """Additive sigmoid gate, one scalar per position.

    Returns the gated features and the gate as an ``(..., H, W)`` tensor.
    """
    if not (Q_c.shape == K_c.shape == V_c.shape):
        raise T.ShapeError(f"guided_gate: Q {Q_c.shape}, K {K_c.shape}, V {V_c.shape} differ")
    pre = T.relu(T.matmul(Q_c, params.w_qc) + T.matmul(K_c, params.w_kc) + params.b_qk)
    gate = T.sigmoid(T.matmul(pre, params.w_psi) + params.b_psi)
    return gate * V_c, T.reshape(gate, gate.shape[:-1])


def gca_forward(F_R: Tensor, params: GcaParams, wiring: str = "refined_query",
                eps: float = 1e-9) -> tuple[Tensor, Tensor]:
    """Spatial context -> channel context -> guided gate.

    ``refined_query`` gates the raw map using the context-enriched map as
    query (Q=F_c, K=F_R, V=F_R); ``all_refined`` uses F_c for all three.
    """
    if F_R.shape[-1] != params.channels:
        raise T.ShapeError(f"gca_forward: features have {F_R.shape[-1]} channels, params expect {params.channels}")
    F_s = spatial_context(F_R, params.w_r)
    F_c = channel_context(F_R, F_s, params, eps=eps)
    if wiring == "refined_query":
        return guided_gate(F_c, F_R, F_R, params)
    if wiring == "all_refined":
        return guided_gate(F_c, F_c, F_c, params)
    raise ConfigError(f"unknown GCA wiring {wiring!r}")


def quantize_gate(values: np.ndarray) -> np.ndarray:
    """round(255 * g) with halves rounded up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).astype(np.uint8)


def export_gate_map(gate: GateMap, path: str | os.PathLike) -> str:
    """Write an 8-bit binary PGM plus a ``<path>.txt`` summary sidecar."""
    path = os.fspath(path)
    q = quantize_gate(gate.values)
    h, w = q.shape
    v = gate.values
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(q.tobytes())
        with open(path + ".txt", "w", encoding="utf-8") as fh:
            fh.write(f"sample_id\t{gate.sample_id}\n")
            fh.write(f"checkpoint_id\t{gate.checkpoint_id}\n")
            fh.write(f"min\t{v.min():.6f}\nmax\t{v.max():.6f}\nmean\t{v.mean():.6f}\n")
    except OSError as exc:
        raise OSError(f"could not write gate map to {path}: {exc}") from exc
    return path


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    parts = buf.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    data = buf[len(buf) - w * h:]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
