"""Model/training configuration, stored as flat key-value JSON."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np


class ConfigError(ValueError):
    pass


GCA_WIRINGS = ("refined_query", "all_refined")
CONDITIONINGS = ("cross_attention",)
ABLATIONS = ("none", "keywords_only")


@dataclass
class ModelConfig:
    # visual input: "features" ingests (feat_h, feat_w, channels) maps,
    # "image" runs the conv stem on (image_size, image_size, 3) images
    visual: str = "features"
    image_size: int = 32
    stem_channels: list[int] = field(default_factory=lambda: [16, 32, 32])
    feat_h: int = 4
    feat_w: int = 4
    channels: int = 32
    reduction: int = 4
    c_att: int = 16
    gca_wiring: str = "refined_query"

    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    fusion_layers: int = 1
    dec_layers: int = 2
    conditioning: str = "cross_attention"
    max_len: int = 50
    vocab_cap: int = 200
    min_kw: int = 5
    max_kw: int = 50
    ln_eps: float = 1e-9
    init: str = "gaussian_fan_in"
    out_init_std: float = 0.02
    ablation: str = "none"

    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 100
    max_steps: int = 0
    seed: int = 42
    dtype: str = "float32"
    train_on: str = "train"
    checkpoint_every: int = 1

    @classmethod
    def full_scale(cls) -> ModelConfig:
        """Dimensions for real-data runs: 356x356 images, 12x12x1280 maps."""
        return cls(visual="image", image_size=356, stem_channels=[32, 64, 128, 256, 1280],
                   feat_h=12, feat_w=12, channels=1280, c_att=640, d_model=1024, heads=8,
                   d_ff=4096, vocab_cap=5000, lr=1e-4, batch_size=64, epochs=100)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> ModelConfig:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.visual in ("features", "image"), f"visual must be 'features' or 'image', got {self.visual!r}")
        need(self.gca_wiring in GCA_WIRINGS, f"gca_wiring must be one of {GCA_WIRINGS}")
        need(self.conditioning in CONDITIONINGS, f"conditioning must be one of {CONDITIONINGS}")
        need(self.ablation in ABLATIONS, f"ablation must be one of {ABLATIONS}")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        need(self.train_on in ("train", "all"), "train_on must be 'train' or 'all'")
        need(min(self.feat_h, self.feat_w, self.channels) >= 1, "feature map dims must be positive")
        need(self.channels // self.reduction >= 1, "bottleneck width channels/reduction must be >= 1")
        need(self.c_att >= 1, "c_att must be >= 1")
        need(self.heads >= 1 and self.d_model % self.heads == 0, "d_model must be divisible by heads")
        need(self.d_ff >= self.d_model, "d_ff must be >= d_model")
        need(self.fusion_layers >= 1 and self.dec_layers >= 1, "layer counts must be >= 1")
        need(self.max_len >= 1, "max_len must be >= 1")
        need(self.vocab_cap > 4, "vocab_cap must leave room beyond the 4 reserved ids")
        need(0 <= self.min_kw <= self.max_kw, "need 0 <= min_kw <= max_kw")
        need(self.batch_size >= 1 and self.epochs >= 0 and self.max_steps >= 0, "bad training schedule")
        need(self.lr >= 0, "lr must be non-negative")
        need(self.checkpoint_every >= 1, "checkpoint_every must be >= 1")
        if self.visual == "image":
            need(len(self.stem_channels) >= 1, "stem needs at least one layer")
            need(self.stem_channels[-1] == self.channels, "last stem width must equal channels")
            size = stem_output_size(self.image_size, len(self.stem_channels))
            need((size, size) == (self.feat_h, self.feat_w),
                 f"stem maps {self.image_size}px to {size}x{size}, config says {self.feat_h}x{self.feat_w}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d).validate()

    def replace(self, **changes) -> ModelConfig:
        return ModelConfig.from_dict({**self.to_dict(), **changes})

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps() + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> ModelConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)


def stem_output_size(size: int, layers: int) -> int:
    """Spatial size after ``layers`` 3x3 stride-2 pad-1 convolutions."""
    for _ in range(layers):
        size = (size - 1) // 2 + 1
    return size
