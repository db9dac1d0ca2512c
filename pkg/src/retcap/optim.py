from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place; clears grads afterwards."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: parameter {missing[0]!r} has no gradient")
    state.step += 1
    t = state.step
    for name, p in params.items():
        dt = p.data.dtype.type
        b1, b2 = dt(state.beta1), dt(state.beta2)
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / dt(1 - state.beta1 ** t)
        vhat = v / dt(1 - state.beta2 ** t)
        p.data = p.data - dt(state.lr) * mhat / (np.sqrt(vhat) + dt(state.eps))
        p.grad = None


class Adam:
    """Thin holder pairing a named parameter set with its AdamState."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
