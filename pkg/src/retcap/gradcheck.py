from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import init_mha
from .decoder import Memory, decode_step_logits, init_decoder
from .language import encode_keywords, init_language, mha, KeywordEmbeddings
from .params import named_parameters
from .rng import Rng
from .tensor import Tensor, no_grad
from .transfusion import init_transfusion, transfusion_forward
from .vision import gca_forward, init_gca

GRAD_TOLERANCE = 1e-4
FD_STEP = 1e-5


def check_gradients(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = FD_STEP) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` is called with the tensor(s) in ``x`` as positional arguments and
    must return a scalar. float64 tensors are perturbed in place (so ``f``
    may also reach them through closures); others are copied to float64.
    The error at each coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    xs = [t if t.dtype == np.float64 else Tensor(t.data, dtype=np.float64) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    f(*xs).backward()
    worst = 0.0
    for t in xs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.reshape(t.shape)
        flat = t.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = f(*xs).item()
                flat[i] = orig - eps
                lo = f(*xs).item()
                flat[i] = orig
                numeric = (hi - lo) / (2 * eps)
                a = a_flat[i]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
    return worst


# block-level checks on seeded inputs: 4x4x8 feature maps, 3 keywords, d_model 16

H, W, C = 4, 4, 8
N_KW, D_MODEL, HEADS, D_FF, VOCAB = 3, 16, 2, 32, 11
F64 = np.float64


def _input(rng: Rng, shape) -> Tensor:
    return Tensor(rng.normal(shape), dtype=F64)


def _probe(rng: Rng, out_shape) -> np.ndarray:
    return rng.normal(out_shape)


def _gca(rng: Rng) -> float:
    # full-width bottleneck: with ReLU ahead of the LN, a narrow bottleneck
    # often leaves a single active unit, where LN output is locally constant
    # and the true gradient sits below finite-difference resolution
    params = init_gca(rng, C, reduction=1, c_att=4, dtype=F64)
    params.b_qk.data[:] = rng.normal(4, std=0.1)
    params.b_psi.data[:] = 0.1
    x = _input(rng, (H, W, C))
    probe = _probe(rng, (H, W, C))
    return check_gradients(lambda *_: T.sum(gca_forward(x, params)[0] * probe),
                           [x, *named_parameters(params).values()])


def _mha(rng: Rng) -> float:
    params = init_mha(rng, D_MODEL, HEADS, dtype=F64)
    ke = _input(rng, (N_KW, D_MODEL))
    probe = _probe(rng, (N_KW, D_MODEL))
    pad = np.zeros(N_KW, dtype=bool)
    return check_gradients(lambda *_: T.sum(mha(KeywordEmbeddings(ke, pad), params) * probe),
                           [ke, *named_parameters(params).values()])


def _encoder(rng: Rng) -> float:
    lang = init_language(rng, VOCAB, D_MODEL, HEADS, dtype=F64)
    lang.ln_gain.data[:] = 1 + rng.normal(D_MODEL, std=0.1)
    lang.ln_bias.data[:] = rng.normal(D_MODEL, std=0.1)
    ids = np.array([4, 7, 5])
    probe = _probe(rng, (N_KW, D_MODEL))
    return check_gradients(
        lambda *_: T.sum(encode_keywords(ids, lang.table, lang.mha, (lang.ln_gain, lang.ln_bias)) * probe),
        named_parameters(lang).values())


def _transfusion(rng: Rng) -> float:
    params = init_transfusion(rng, C, D_MODEL, HEADS, D_FF, layers=1, dtype=F64)
    for layer in params.layers:
        layer.b_h.data[:] = rng.normal(D_FF, std=0.1)
    f_gca = _input(rng, (H, W, C))
    ke = _input(rng, (N_KW, D_MODEL))
    probe = _probe(rng, (H * W, D_MODEL))
    return check_gradients(lambda *_: T.sum(transfusion_forward(f_gca, ke, params).F_prime * probe),
                           [f_gca, ke, *named_parameters(params).values()])


def _decoder(rng: Rng) -> float:
    params = init_decoder(rng, VOCAB, C, D_MODEL, HEADS, D_FF, layers=1, max_len=6, out_std=0.5, dtype=F64)
    params.layers[0].b_1.data[:] = rng.normal(D_FF, std=0.1)
    mem = _input(rng, (2 * H * W, D_MODEL))
    prefix = np.array([2, 5, 9, 4, 7])
    targets = np.array([5, 9, 4, 7, 3])

    def loss(*_):
        return T.cross_entropy(decode_step_logits(prefix, Memory(mem), params), targets)

    return check_gradients(loss, [mem, *named_parameters(params).values()])


BLOCKS: dict[str, Callable[[Rng], float]] = {
    "gca": _gca,
    "mha": _mha,
    "encoder": _encoder,
    "transfusion": _transfusion,
    "decoder": _decoder,
}


def check_block(name: str, seed: int = 0) -> tuple[float, float]:
    """(max relative error, seconds) for one named block."""
    start = time.perf_counter()
    err = BLOCKS[name](Rng((seed, list(BLOCKS).index(name))))
    return err, time.perf_counter() - start
