"""Parameter construction and naming helpers shared by the model blocks."""
from __future__ import annotations

import dataclasses

import numpy as np

from .rng import Rng
from .tensor import Tensor


def gaussian(rng: Rng, shape, fan_in: int | None = None, std: float | None = None, dtype=np.float32) -> Tensor:
    """Scaled Gaussian init; std defaults to 1/sqrt(fan_in)."""
    shape = tuple(shape)
    if std is None:
        std = 1.0 / np.sqrt(fan_in if fan_in else shape[0])
    return Tensor(rng.normal(shape, std=std, dtype=dtype), requires_grad=True)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten nested dataclasses/lists of Tensors into ``{"a.b.0.c": t}``."""
    out: dict[str, Tensor] = {}

    def walk(node, name: str) -> None:
        if node is None:
            return
        if isinstance(node, Tensor):
            out[name] = node
        elif dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{name}.{i}" if name else str(i))

    walk(obj, prefix)
    return out


def convert(obj, dtype):
    """Copy of a parameter tree with every tensor cast to ``dtype``."""
    if obj is None:
        return None
    if isinstance(obj, Tensor):
        return Tensor(obj.data.astype(dtype), requires_grad=obj.requires_grad)
    if dataclasses.is_dataclass(obj):
        return dataclasses.replace(obj, **{f.name: convert(getattr(obj, f.name), dtype)
                                           for f in dataclasses.fields(obj) if f.init})
    if isinstance(obj, list):
        return [convert(x, dtype) for x in obj]
    if isinstance(obj, tuple):
        return tuple(convert(x, dtype) for x in obj)
    return obj
