"""Seedable random streams.

Bits come from PCG64 (O'Neill's permuted congruential generator, 128-bit
state, 64-bit output), which numpy implements identically on every
platform. Uniform doubles take the top 53 bits of each draw; Gaussians are
produced from pairs of uniforms with the Box-Muller transform.
"""
from __future__ import annotations

import math

import numpy as np


class Rng:
    def __init__(self, seed: int | tuple[int, ...] | list[int] = 0):
        self._bits = np.random.PCG64(np.random.SeedSequence(seed))

    @property
    def state(self) -> dict:
        return self._bits.state

    @state.setter
    def state(self, value: dict) -> None:
        self._bits.state = value

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(n)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 values in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        shape = tuple(shape) if isinstance(shape, (tuple, list)) else (int(shape),)
        n = int(np.prod(shape))
        k = (n + 1) // 2
        u1 = 1.0 - self.uniform(k)  # (0, 1], keeps log finite
        u2 = self.uniform(k)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (z * std).reshape(shape).astype(dtype)

    def integers(self, high: int, n: int) -> np.ndarray:
        """``n`` integers uniform on [0, high)."""
        return np.minimum((self.uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
