"""Text preprocessing, manifest loading, splits and synthetic data."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gten
from .config import ModelConfig
from .language import BOS, EOS, PAD, Vocab
from .model import Batch
from .rng import Rng

log = logging.getLogger(__name__)

MAX_CAPTION_WORDS = 50
SPLITS = ("train", "val", "test")
_PUNCT = re.compile(r"[^\w\s]|_")


class DatasetError(ValueError):
    pass


def preprocess_text(raw: str, max_tokens: int | None = None) -> list[str]:
    """Lowercase, punctuation to spaces, whitespace split, optional truncation."""
    tokens = _PUNCT.sub(" ", raw.lower()).split()
    return tokens if max_tokens is None else tokens[:max_tokens]


def encode_caption(tokens: Sequence[str], vocab: Vocab, max_words: int = MAX_CAPTION_WORDS) -> np.ndarray:
    return np.array([BOS, *vocab.encode(tokens[:max_words]), EOS], dtype=np.int64)


@dataclass
class Sample:
    id: str
    visual: np.ndarray
    keywords: np.ndarray      # token ids
    caption: np.ndarray       # BOS ... EOS
    split: str = "train"
    keyword_text: list[str] = field(default_factory=list)
    caption_text: list[str] = field(default_factory=list)


@dataclass
class Dataset:
    samples: list[Sample]
    vocab: Vocab
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[Sample]:
        if name == "all":
            return list(self.samples)
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]


def assign_splits(ids: Sequence[str], ratios=(0.6, 0.2, 0.2)) -> dict[str, str]:
    """Deterministic 60/20/20 partition ordered by SHA-256 of each id.

    Independent of manifest order, so re-sorting a manifest cannot move a
    sample between splits.
    """
    order = sorted(ids, key=lambda i: (hashlib.sha256(i.encode("utf-8")).hexdigest(), i))
    n = len(order)
    n_train = int(n * ratios[0] + 0.5)
    n_val = int(n * ratios[1] + 0.5)
    out = {}
    for k, sid in enumerate(order):
        out[sid] = "train" if k < n_train else "val" if k < n_train + n_val else "test"
    return out


def expected_visual_shape(cfg: ModelConfig) -> tuple[int, int, int]:
    if cfg.visual == "image":
        return (cfg.image_size, cfg.image_size, 3)
    return (cfg.feat_h, cfg.feat_w, cfg.channels)


def load_dataset(manifest: str | os.PathLike, cfg: ModelConfig, vocab: Vocab | None = None) -> Dataset:
    """Read a JSON-lines manifest of ``{"id", "image", "keywords", "caption"}`` records.

    Image paths are resolved relative to the manifest. Captions are cut to
    ``min(50, max_len)`` words so teacher forcing fits the decoder. Records whose keyword
    count falls outside ``[min_kw, max_kw]`` or whose caption is empty are
    skipped and listed in ``Dataset.rejected``. If ``vocab`` is None one is
    built from the training records.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")
    root = manifest.parent
    shape = expected_visual_shape(cfg)
    raw: list[tuple[str, np.ndarray, list[str], list[str]]] = []
    rejected: list[tuple[str, str]] = []
    seen: set[str] = set()
    with open(manifest, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{manifest}:{lineno}: malformed JSON ({exc.msg})") from None
            missing = [k for k in ("id", "image", "keywords", "caption") if k not in rec]
            if missing:
                raise DatasetError(f"{manifest}:{lineno}: missing field(s) {missing}")
            sid = str(rec["id"])
            if sid in seen:
                raise DatasetError(f"{manifest}:{lineno}: duplicate id {sid!r}")
            seen.add(sid)
            path = root / rec["image"]
            try:
                visual = gten.load(path)
            except (OSError, gten.GtenError) as exc:
                raise DatasetError(f"{manifest}:{lineno}: cannot read tensor {path}: {exc}") from None
            if visual.shape != shape:
                raise DatasetError(f"{manifest}:{lineno}: tensor {path} has shape {visual.shape}, expected {shape}")
            kw = preprocess_text(rec["keywords"])
            cap = preprocess_text(rec["caption"], min(MAX_CAPTION_WORDS, cfg.max_len))
            if not cfg.min_kw <= len(kw) <= cfg.max_kw:
                reason = f"{len(kw)} keywords outside [{cfg.min_kw}, {cfg.max_kw}]"
                rejected.append((sid, reason))
                log.warning("rejecting sample %s (line %d): %s", sid, lineno, reason)
                continue
            if not cap:
                rejected.append((sid, "empty caption"))
                log.warning("rejecting sample %s (line %d): empty caption", sid, lineno)
                continue
            raw.append((sid, visual.astype(cfg.np_dtype), kw, cap))

    if not raw:
        warnings.warn(f"{manifest}: dataset is empty", stacklevel=2)
    splits = assign_splits([r[0] for r in raw])
    if vocab is None:
        pool = [r for r in raw if cfg.train_on == "all" or splits[r[0]] == "train"]
        vocab = Vocab.build([r[2] + r[3] for r in pool], cfg.vocab_cap)
    samples = [
        Sample(sid, visual, np.array(vocab.encode(kw), dtype=np.int64), encode_caption(cap, vocab, cfg.max_len),
               splits[sid], kw, cap)
        for sid, visual, kw, cap in raw
    ]
    return Dataset(samples, vocab, rejected)


def make_batch(samples: Sequence[Sample]) -> Batch:
    """Stack visuals and PAD-pad keyword and caption id rows."""
    if not samples:
        raise ValueError("cannot batch zero samples")
    n_kw = max(len(s.keywords) for s in samples)
    n_cap = max(len(s.caption) for s in samples)
    kw = np.full((len(samples), n_kw), PAD, dtype=np.int64)
    cap = np.full((len(samples), n_cap), PAD, dtype=np.int64)
    for i, s in enumerate(samples):
        kw[i, :len(s.keywords)] = s.keywords
        cap[i, :len(s.caption)] = s.caption
    return Batch([s.id for s in samples], np.stack([s.visual for s in samples]), kw, cap)


# synthetic data ----------------------------------------------------------------

DISEASES = (
    ("retinopathy", "diabetic retinopathy"),
    ("occlusion", "branch retinal vein occlusion"),
    ("degeneration", "age related macular degeneration"),
    ("edema", "cystoid macular edema"),
)
MODALITIES = ("fundus", "angiography")
# one finding per visual class; class k puts its blob in quadrant k
FINDINGS = (
    ("small hemorrhages", "upper left"),
    ("hard exudates", "upper right"),
    ("cotton wool spots", "lower left"),
    ("drusen deposits", "lower right"),
)
FILLER_KEYWORDS = ("retina", "macula", "lesion")
_BLOB_COLORS = np.array([[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.2, 1.0], [1.0, 1.0, 0.2]])


def synthetic_text(disease: int, modality: int, finding: int) -> tuple[str, str]:
    kw_token, phrase = DISEASES[disease]
    what, where = FINDINGS[finding]
    keywords = " ".join((kw_token, MODALITIES[modality], *FILLER_KEYWORDS))
    caption = f"{MODALITIES[modality]} image of {phrase} showing {what} in the {where} quadrant"
    return keywords, caption


def synthetic_visual(cfg: ModelConfig, finding: int, rng: Rng) -> np.ndarray:
    """Noisy map with a blob in the finding's quadrant.

    Feature maps carry a class-specific channel signature inside the blob;
    raw images carry a class-specific colour.
    """
    top, left = divmod(finding, 2)
    if cfg.visual == "image":
        s = cfg.image_size
        img = 0.2 + rng.normal((s, s, 3), std=0.03)
        yy, xx = np.mgrid[0:s, 0:s]
        cy, cx = (top + 0.5) * s / 2, (left + 0.5) * s / 2
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= (s / 6) ** 2
        img[disk] = _BLOB_COLORS[finding]
        return np.clip(img, 0.0, 1.0).astype(np.float32)
    h, w, c = cfg.feat_h, cfg.feat_w, cfg.channels
    fmap = rng.normal((h, w, c), std=0.1)
    rows = slice(top * h // 2, (top + 1) * h // 2 or 1)
    cols = slice(left * w // 2, (left + 1) * w // 2 or 1)
    signature = np.where(np.arange(c) % len(FINDINGS) == finding, 1.5, 0.25)
    fmap[rows, cols, :] += signature
    return fmap.astype(np.float32)


def generate_synthetic(cfg: ModelConfig, n: int, seed: int, out_dir: str | os.PathLike) -> Path:
    """Write ``n`` GTEN tensors plus ``manifest.jsonl`` under ``out_dir``.

    Captions are a template over (disease, modality) from the keywords and a
    finding readable only from the visual blob, so keywords alone never pin
    down the caption.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    combos = [(d, m, f) for d in range(len(DISEASES)) for m in range(len(MODALITIES)) for f in range(len(FINDINGS))]
    picks: list[tuple[int, int, int]] = []
    while len(picks) < n:
        picks.extend(combos[i] for i in rng.permutation(len(combos)))
    picks = picks[:n]
    if n >= 2:
        by_kw: dict[tuple[int, int], set[int]] = {}
        for d, m, f in picks:
            by_kw.setdefault((d, m), set()).add(f)
        if not any(len(fs) >= 2 for fs in by_kw.values()):
            d, m, f = picks[0]
            picks[1] = (d, m, (f + 1) % len(FINDINGS))

    lines = []
    captions_by_kw: dict[str, set[str]] = {}
    for i, (d, m, f) in enumerate(picks):
        sid = f"syn{i:05d}"
        keywords, caption = synthetic_text(d, m, f)
        captions_by_kw.setdefault(keywords, set()).add(caption)
        gten.save(out / f"{sid}.gten", synthetic_visual(cfg, f, rng))
        lines.append(json.dumps({"id": sid, "image": f"{sid}.gten", "keywords": keywords,
                                 "caption": caption}, sort_keys=True))
    if n >= 2 and not any(len(c) >= 2 for c in captions_by_kw.values()):
        raise AssertionError("synthetic set lost its keyword ambiguity")
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest
