"""Autoregressive caption decoder (pre-LN transformer blocks).

Every block runs causal self-attention over the caption prefix, then
cross-attention into a fixed memory of visual and fused tokens, then a
position-wise FFN.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import MhaParams, init_mha, multi_head_attention
from .language import BOS, EOS, PAD
from .params import gaussian, ones, zeros
from .rng import Rng
from .tensor import ContractError, Tensor


class LengthError(ContractError):
    pass


@dataclass
class DecoderLayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    self_mha: MhaParams
    ln2_gain: Tensor
    ln2_bias: Tensor
    cross_mha: MhaParams
    ln3_gain: Tensor
    ln3_bias: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor


@dataclass
class DecoderParams:
    tok_emb: Tensor    # (V, d_model)
    pos_emb: Tensor    # (max_len + 1, d_model): BOS plus up to max_len tokens
    w_mem: Tensor      # (C, d_model) projection of visual tokens into memory
    b_mem: Tensor
    layers: list[DecoderLayerParams]
    lnf_gain: Tensor
    lnf_bias: Tensor
    w_out: Tensor      # (d_model, V)
    b_out: Tensor

    @property
    def max_positions(self) -> int:
        return self.pos_emb.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.w_out.shape[1]


@dataclass
class Memory:
    tokens: Tensor                 # (..., M, d_model)
    pad: np.ndarray | None = None  # (..., M) True where a memory slot is padding


def init_decoder(rng: Rng, vocab_size: int, channels: int, d_model: int, heads: int, d_ff: int,
                 layers: int, max_len: int, out_std: float = 0.02, dtype=np.float32) -> DecoderParams:
    blocks = []
    for _ in range(layers):
        blocks.append(DecoderLayerParams(
            ln1_gain=ones((d_model,), dtype), ln1_bias=zeros((d_model,), dtype),
            self_mha=init_mha(rng, d_model, heads, dtype),
            ln2_gain=ones((d_model,), dtype), ln2_bias=zeros((d_model,), dtype),
            cross_mha=init_mha(rng, d_model, heads, dtype),
            ln3_gain=ones((d_model,), dtype), ln3_bias=zeros((d_model,), dtype),
            w_1=gaussian(rng, (d_model, d_ff), fan_in=d_model, dtype=dtype), b_1=zeros((d_ff,), dtype),
            w_2=gaussian(rng, (d_ff, d_model), fan_in=d_ff, dtype=dtype), b_2=zeros((d_model,), dtype),
        ))
    return DecoderParams(
        tok_emb=gaussian(rng, (vocab_size, d_model), std=1.0, dtype=dtype),
        pos_emb=gaussian(rng, (max_len + 1, d_model), std=0.1, dtype=dtype),
        w_mem=gaussian(rng, (channels, d_model), fan_in=channels, dtype=dtype),
        b_mem=zeros((d_model,), dtype),
        layers=blocks,
        lnf_gain=ones((d_model,), dtype), lnf_bias=zeros((d_model,), dtype),
        w_out=gaussian(rng, (d_model, vocab_size), std=out_std, dtype=dtype),
        b_out=zeros((vocab_size,), dtype),
    )


def build_memory(F_gca: Tensor, F_prime: Tensor, params: DecoderParams) -> Memory:
    """Projected visual tokens followed by fused tokens: (..., 2*H*W, d_model)."""
    *lead, h, w, c = F_gca.shape
    visual = T.matmul(T.reshape(F_gca, (*lead, h * w, c)), params.w_mem) + params.b_mem
    return Memory(T.concat([visual, F_prime], axis=-2))


def decoder_layer(x: Tensor, memory: Memory, layer: DecoderLayerParams, eps: float = 1e-9) -> Tensor:
    h = T.layer_norm(x, layer.ln1_gain, layer.ln1_bias, eps=eps)
    x = x + multi_head_attention(h, h, layer.self_mha, causal=True)[0]
    h = T.layer_norm(x, layer.ln2_gain, layer.ln2_bias, eps=eps)
    x = x + multi_head_attention(h, memory.tokens, layer.cross_mha, key_pad=memory.pad)[0]
    h = T.layer_norm(x, layer.ln3_gain, layer.ln3_bias, eps=eps)
    ffn = T.matmul(T.relu(T.matmul(h, layer.w_1) + layer.b_1), layer.w_2) + layer.b_2
    return x + ffn


def decode_step_logits(prefix, memory: Memory, params: DecoderParams, eps: float = 1e-9) -> Tensor:
    """Logits for every prefix position: ids (..., t) -> (..., t, V)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    t = prefix.shape[-1]
    if t < 1:
        raise ContractError("decoder prefix is empty")
    if t > params.max_positions:
        raise LengthError(f"prefix length {t} exceeds the {params.max_positions} decoder positions")
    x = T.embedding_lookup(params.tok_emb, prefix) + params.pos_emb[:t]
    for layer in params.layers:
        x = decoder_layer(x, memory, layer, eps=eps)
    x = T.layer_norm(x, params.lnf_gain, params.lnf_bias, eps=eps)
    return T.matmul(x, params.w_out) + params.b_out


# decoding ------------------------------------------------------------------------

StepFn = Callable[[np.ndarray], np.ndarray]
"""Maps prefixes (k, t) of equal length to next-token log-probs (k, V)."""


def _ban(logp: np.ndarray, banned: Sequence[int]) -> np.ndarray:
    logp = np.array(logp, dtype=np.float64)
    logp[:, list(banned)] = -np.inf
    return logp


def greedy_search(step: StepFn, batch: int, max_len: int, bos: int = BOS, eos: int = EOS,
                  banned: Sequence[int] = (PAD, BOS)) -> list[list[int]]:
    """Argmax decoding of ``batch`` sequences in lockstep (ties -> lower id)."""
    prefix = np.full((batch, 1), bos, dtype=np.int64)
    done = np.zeros(batch, dtype=bool)
    out: list[list[int]] = [[] for _ in range(batch)]
    for _ in range(max_len):
        nxt = np.argmax(_ban(step(prefix), banned), axis=1)
        for i in np.nonzero(~done)[0]:
            if nxt[i] == eos:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        nxt = np.where(done, PAD, nxt)
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return out


def beam_search(step: StepFn, width: int, max_len: int, bos: int = BOS, eos: int = EOS,
                banned: Sequence[int] = (PAD, BOS)) -> list[int]:
    """Length-normalized beam search.

    Candidates are ranked by cumulative log-prob; a hypothesis that emits EOS
    is retired and keeps its slot for that step. The result maximizes
    log-prob divided by the number of generated tokens (EOS included), ties
    going to the lexicographically smaller id sequence.
    """
    if width < 1:
        raise ContractError("beam width must be >= 1")
    live: list[tuple[tuple[int, ...], float]] = [((bos,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for _ in range(max_len):
        logp = _ban(step(np.array([seq for seq, _ in live], dtype=np.int64)), banned)
        cands = []
        for (seq, score), row in zip(live, logp):
            for tok in np.nonzero(np.isfinite(row))[0]:
                cands.append((score + float(row[tok]), seq + (int(tok),)))
        cands.sort(key=lambda c: (-c[0], c[1]))
        live = []
        for score, seq in cands[:width]:
            (finished if seq[-1] == eos else live).append((seq, score))
        if not live:
            break
    pool = finished + live
    best, _ = min(pool, key=lambda c: (-c[1] / (len(c[0]) - 1), c[0]))
    return [t for t in best[1:] if t != eos]


def generate(memory: Memory, params: DecoderParams, mode: str = "greedy", beam_width: int = 1,
             max_len: int | None = None, eps: float = 1e-9) -> list[int]:
    """Caption token ids for a single sample's memory (no BOS/EOS/PAD)."""
    max_len = params.max_positions - 1 if max_len is None else min(max_len, params.max_positions - 1)

    def step(prefix: np.ndarray) -> np.ndarray:
        with T.no_grad():
            logits = decode_step_logits(prefix, memory, params, eps=eps)
            return T.log_softmax(logits[:, -1], axis=-1).data

    if mode == "greedy":
        return greedy_search(step, 1, max_len)[0]
    if mode == "beam":
        return beam_search(step, beam_width, max_len)
    raise ValueError(f"unknown decoding mode {mode!r}")
