"""Full captioning model: vision encoder + keyword encoder + fusion + decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .decoder import (DecoderParams, Memory, beam_search, build_memory, decode_step_logits,
                      greedy_search, init_decoder)
from .language import BOS, PAD, LanguageParams, encode_keywords, init_language
from .params import named_parameters
from .rng import Rng
from .tensor import ContractError, Tensor
from .transfusion import TransFusionParams, init_transfusion, transfusion_forward
from .vision import ConvStemParams, GcaParams, conv_stem_forward, gca_forward, init_conv_stem, init_gca


@dataclass
class ModelParams:
    stem: ConvStemParams | None
    gca: GcaParams | None
    language: LanguageParams
    fusion: TransFusionParams | None
    decoder: DecoderParams

    def named(self) -> dict[str, Tensor]:
        return named_parameters(self)


@dataclass
class Encoded:
    memory: Memory
    gate: Tensor | None        # (B, H, W)
    alignment: Tensor | None   # (B, H*W, n)
    F_gca: Tensor | None = None
    KE_final: Tensor | None = None


@dataclass
class Batch:
    ids: list[str]
    visual: np.ndarray      # (B, ...) raw images or feature maps
    keywords: np.ndarray    # (B, n) PAD-padded
    captions: np.ndarray    # (B, t) BOS ... EOS, PAD-padded

    def __len__(self) -> int:
        return len(self.ids)


def init_model(config: ModelConfig, vocab_size: int, rng: Rng | None = None) -> ModelParams:
    cfg = config.validate()
    rng = rng or Rng(cfg.seed)
    dt = cfg.np_dtype
    keywords_only = cfg.ablation == "keywords_only"
    stem = init_conv_stem(rng, cfg.stem_channels, dtype=dt) if cfg.visual == "image" and not keywords_only else None
    gca = None if keywords_only else init_gca(rng, cfg.channels, cfg.reduction, cfg.c_att, dtype=dt)
    language = init_language(rng, vocab_size, cfg.d_model, cfg.heads, dtype=dt)
    fusion = None if keywords_only else init_transfusion(
        rng, cfg.channels, cfg.d_model, cfg.heads, cfg.d_ff, cfg.fusion_layers, dtype=dt)
    decoder = init_decoder(rng, vocab_size, cfg.channels, cfg.d_model, cfg.heads, cfg.d_ff,
                           cfg.dec_layers, cfg.max_len, out_std=cfg.out_init_std, dtype=dt)
    if keywords_only:
        decoder.w_mem = decoder.b_mem = None
    return ModelParams(stem, gca, language, fusion, decoder)


def visual_features(params: ModelParams, cfg: ModelConfig, visual) -> Tensor:
    x = visual if isinstance(visual, Tensor) else Tensor(np.asarray(visual), dtype=cfg.np_dtype)
    if cfg.visual == "image":
        x = conv_stem_forward(x, params.stem, cfg.image_size)
    want = (cfg.feat_h, cfg.feat_w, cfg.channels)
    if x.shape[-3:] != want:
        raise ConfigError(f"visual features have shape {x.shape[-3:]}, config expects {want}")
    return x


def encode(params: ModelParams, cfg: ModelConfig, visual, keywords) -> Encoded:
    """Build the decoder memory for a batch (or single sample)."""
    keywords = np.asarray(keywords, dtype=np.int64)
    kw_pad = keywords == PAD
    lang = params.language
    KE_final = encode_keywords(keywords, lang.table, lang.mha, (lang.ln_gain, lang.ln_bias), eps=cfg.ln_eps)
    if cfg.ablation == "keywords_only":
        return Encoded(Memory(KE_final, kw_pad), None, None, None, KE_final)
    F_R = visual_features(params, cfg, visual)
    F_gca, gate = gca_forward(F_R, params.gca, cfg.gca_wiring, eps=cfg.ln_eps)
    fused = transfusion_forward(F_gca, KE_final, params.fusion, kw_pad, eps=cfg.ln_eps)
    memory = build_memory(F_gca, fused.F_prime, params.decoder)
    return Encoded(memory, gate, fused.alignment, F_gca, KE_final)


def caption_loss(params: ModelParams, cfg: ModelConfig, batch: Batch) -> Tensor:
    """Mean teacher-forced cross-entropy over non-PAD target positions."""
    caps = np.asarray(batch.captions, dtype=np.int64)
    if caps.ndim == 1:
        caps = caps[None]
    if caps.shape[-1] < 2 or (caps[:, 0] != BOS).any() or (caps[:, 1] == PAD).any():
        raise ContractError("caption must start with BOS and contain at least one target token")
    enc = encode(params, cfg, batch.visual, batch.keywords)
    logits = decode_step_logits(caps[:, :-1], enc.memory, params.decoder, eps=cfg.ln_eps)
    return T.cross_entropy(logits, caps[:, 1:], ignore_id=PAD)


def _memory_row(memory: Memory, i: int) -> Memory:
    pad = None if memory.pad is None else memory.pad[i]
    return Memory(memory.tokens[i], pad)


def generate_batch(params: ModelParams, cfg: ModelConfig, batch: Batch, mode: str = "greedy",
                   beam_width: int = 1, max_len: int | None = None) -> list[list[int]]:
    """Caption ids (BOS/EOS/PAD stripped) for every sample of ``batch``."""
    limit = cfg.max_len if max_len is None else min(max_len, cfg.max_len)
    with T.no_grad():
        enc = encode(params, cfg, batch.visual, batch.keywords)

        def step_for(memory: Memory):
            def step(prefix: np.ndarray) -> np.ndarray:
                logits = decode_step_logits(prefix, memory, params.decoder, eps=cfg.ln_eps)
                return T.log_softmax(logits[:, -1], axis=-1).data
            return step

        if mode == "greedy":
            return greedy_search(step_for(enc.memory), len(batch), limit)
        if mode == "beam":
            return [beam_search(step_for(_memory_row(enc.memory, i)), beam_width, limit)
                    for i in range(len(batch))]
    raise ValueError(f"unknown decoding mode {mode!r}")
