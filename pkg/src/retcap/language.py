"""Keyword vocabulary and the self-attention language encoder."""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .attention import MhaParams, init_mha, multi_head_attention, self_attention
from .params import gaussian, ones, zeros
from .rng import Rng
from .tensor import Tensor

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<bos>", "<eos>")

__all__ = [
    "PAD", "UNK", "BOS", "EOS", "Vocab", "KeywordEmbeddings", "LanguageParams",
    "MhaParams", "init_language", "embed_keywords", "self_attention", "mha", "encode_keywords",
]


class Vocab:
    """Token <-> id bijection; ids 0-3 are reserved for PAD/UNK/BOS/EOS."""

    def __init__(self, tokens: Sequence[str] = (), max_size: int | None = None):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        self.max_size = max_size
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self.stoi:
            return self.stoi[token]
        if self.max_size is not None and len(self.itos) >= self.max_size:
            raise ValueError(f"vocabulary is full ({self.max_size} entries)")
        self.stoi[token] = len(self.itos)
        self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], max_size: int) -> Vocab:
        """Keep the ``max_size - 4`` most frequent tokens (ties: alphabetical)."""
        counts = Counter(tok for seq in sequences for tok in seq if tok not in RESERVED)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([tok for tok, _ in ranked[: max_size - len(RESERVED)]], max_size=max_size)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(tok, UNK) for tok in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path: str | os.PathLike) -> None:
        """UTF-8, one token per line; line k holds id k + 4."""
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike, max_size: int | None = None) -> Vocab:
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens, max_size=max_size)


@dataclass
class KeywordEmbeddings:
    KE: Tensor          # (..., n, d_model)
    mask: np.ndarray    # (..., n) True at PAD positions


@dataclass
class LanguageParams:
    table: Tensor       # (V, d_model)
    mha: MhaParams
    ln_gain: Tensor
    ln_bias: Tensor


def init_language(rng: Rng, vocab_size: int, d_model: int, heads: int, dtype=np.float32) -> LanguageParams:
    return LanguageParams(
        table=gaussian(rng, (vocab_size, d_model), std=1.0, dtype=dtype),
        mha=init_mha(rng, d_model, heads, dtype),
        ln_gain=ones((d_model,), dtype),
        ln_bias=zeros((d_model,), dtype),
    )


def embed_keywords(ids, table: Tensor) -> KeywordEmbeddings:
    ids = np.asarray(ids, dtype=np.int64)
    return KeywordEmbeddings(T.embedding_lookup(table, ids), ids == PAD)


def mha(KE: KeywordEmbeddings, params: MhaParams) -> Tensor:
    """Multi-head self-attention over keyword embeddings, PAD keys masked."""
    return multi_head_attention(KE.KE, KE.KE, params, key_pad=KE.mask)[0]


def encode_keywords(ids, table: Tensor, params: MhaParams, ln: tuple[Tensor, Tensor],
                    eps: float = 1e-9) -> Tensor:
    """Row-wise LN(KE + MHA(KE)); PAD rows are computed but stay masked downstream."""
    ke = embed_keywords(ids, table)
    return T.layer_norm(ke.KE + mha(ke, params), ln[0], ln[1], eps=eps)
