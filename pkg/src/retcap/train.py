"""Training loop, checkpoints and evaluation."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gten
from . import tensor as T
from .config import ModelConfig
from .data import Dataset, Sample, make_batch
from .language import Vocab
from .metrics import MetricReport, score_corpus
from .model import ModelParams, caption_loss, generate_batch, init_model
from .optim import AdamState, adam_step
from .rng import Rng

log = logging.getLogger(__name__)

CKPT_MAGIC = b"GCKP"
CKPT_VERSION = 1
LOG_HEADER = "epoch,step,split,loss"


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, last_good: str | None):
        super().__init__(f"{msg}; last good checkpoint: {last_good}")
        self.last_good = last_good


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocab
    params: ModelParams
    adam: AdamState
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Single file: magic, version, JSON header length, JSON header, GTEN blobs.

    Parameters and Adam moments are stored under ``param/``, ``adam_m/`` and
    ``adam_v/`` prefixes; byte layout depends only on the contents.
    """
    blobs = []
    index = []
    offset = 0
    tensors = [(f"param/{k}", p.data) for k, p in ckpt.params.named().items()]
    tensors += [(f"adam_m/{k}", v) for k, v in sorted(ckpt.adam.m.items())]
    tensors += [(f"adam_v/{k}", v) for k, v in sorted(ckpt.adam.v.items())]
    for name, arr in tensors:
        blob = gten.encode(arr)
        index.append([name, offset, len(blob)])
        blobs.append(blob)
        offset += len(blob)
    a = ckpt.adam
    header = {
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.itos[4:],
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "adam": {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(head)) + head)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 16
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for name, off, length in header["tensors"]:
        arr, end = gten.decode(buf, base + off)
        if end != base + off + length:
            raise ValueError(f"{path}: tensor {name} has inconsistent length")
        arrays[name] = arr
    cfg = ModelConfig.from_dict(header["config"])
    vocab = Vocab(header["vocab"], max_size=cfg.vocab_cap)
    params = init_model(cfg, len(vocab), Rng(0))
    for name, p in params.named().items():
        key = f"param/{name}"
        if key not in arrays:
            raise ValueError(f"{path}: missing parameter {name}")
        if arrays[key].shape != p.shape:
            raise ValueError(f"{path}: parameter {name} has shape {arrays[key].shape}, expected {p.shape}")
        p.data = arrays[key]
    a = header["adam"]
    adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"],
                     m={k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                     v={k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")})
    return Checkpoint(cfg, vocab, params, adam, header["epoch"], header["step"], header["rng_state"])


def batches(samples: Sequence[Sample], size: int, order: np.ndarray | None = None):
    idx = np.arange(len(samples)) if order is None else order
    for i in range(0, len(idx), size):
        yield make_batch([samples[j] for j in idx[i:i + size]])


def mean_loss(params: ModelParams, cfg: ModelConfig, samples: Sequence[Sample]) -> float:
    """Token-weighted mean cross-entropy over ``samples`` (no graph)."""
    total, count = 0.0, 0
    with T.no_grad():
        for batch in batches(samples, cfg.batch_size):
            n = int((batch.captions[:, 1:] != 0).sum())
            total += caption_loss(params, cfg, batch).item() * n
            count += n
    return total / count if count else float("nan")


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng((seed, epoch)).permutation(n)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoints: list[str]
    loss_log: str


def train(cfg: ModelConfig, dataset: Dataset, out_dir: str | os.PathLike,
          resume: str | os.PathLike | None = None) -> TrainResult:
    """Mini-batch teacher-forced training with Adam.

    Writes ``loss_log.csv`` (one train row per step, one val row per epoch),
    ``vocab.txt``, ``config.json`` and a checkpoint every
    ``checkpoint_every`` epochs plus ``last.gckp``. Shuffling for epoch ``e``
    is derived from ``(seed, e)`` alone, so resuming from an epoch-boundary
    checkpoint replays the uninterrupted run exactly.
    """
    cfg = cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set = dataset.split(cfg.train_on)
    val_set = dataset.split("val") if cfg.train_on == "train" else []
    if not train_set:
        raise ValueError("no training samples")

    if resume is not None:
        ck = load_checkpoint(resume)
        if ck.vocab != dataset.vocab:
            raise ValueError("checkpoint vocabulary differs from the dataset vocabulary")
        params, adam, epoch0, step = ck.params, ck.adam, ck.epoch, ck.step
        rng = Rng(cfg.seed)
        rng.state = ck.rng_state
        last_good: str | None = os.fspath(resume)
    else:
        rng = Rng(cfg.seed)
        params = init_model(cfg, len(dataset.vocab), rng)
        adam = AdamState(lr=cfg.lr)
        epoch0, step = 0, 0
        last_good = None
    named = params.named()
    cfg.save(out / "config.json")
    dataset.vocab.save(out / "vocab.txt")

    log_path = out / "loss_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    saved: list[str] = []
    ckpt = Checkpoint(cfg, dataset.vocab, params, adam, epoch0, step, rng.state)
    with open(log_path, mode, encoding="utf-8", newline="") as fh:
        if mode == "w":
            fh.write(LOG_HEADER + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        stop = False
        for epoch in range(epoch0, cfg.epochs):
            for batch in batches(train_set, cfg.batch_size, epoch_order(cfg.seed, epoch, len(train_set))):
                if cfg.max_steps and step >= cfg.max_steps:
                    stop = True
                    break
                try:
                    loss = caption_loss(params, cfg, batch)
                    loss.backward()
                except T.NonFiniteError as exc:
                    raise TrainingDiverged(f"non-finite values at step {step + 1}: {exc}", last_good) from exc
                adam_step(named, adam)
                step += 1
                writer.writerow([epoch + 1, step, "train", repr(loss.item())])
            if stop:
                break
            if val_set:
                writer.writerow([epoch + 1, step, "val", repr(mean_loss(params, cfg, val_set))])
            fh.flush()
            ckpt = Checkpoint(cfg, dataset.vocab, params, adam, epoch + 1, step, rng.state)
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
                path = out / f"ckpt_epoch{epoch + 1:04d}.gckp"
                save_checkpoint(path, ckpt)
                saved.append(os.fspath(path))
                last_good = os.fspath(path)
    if stop:
        ckpt = Checkpoint(cfg, dataset.vocab, params, adam, ckpt.epoch, step, rng.state)
    save_checkpoint(out / "last.gckp", ckpt)
    return TrainResult(ckpt, saved, os.fspath(log_path))


def caption_words(ids: Sequence[int], vocab: Vocab) -> list[str]:
    return vocab.decode(ids)


def evaluate(ckpt: Checkpoint, samples: Sequence[Sample], out: str | os.PathLike | None = None,
             mode: str = "greedy", beam_width: int = 1) -> MetricReport:
    """Generate captions for ``samples`` and score them against their references."""
    cfg = ckpt.config
    hyps, refs, ids = [], [], []
    for batch in batches(samples, cfg.batch_size):
        for sid, gen, cap in zip(batch.ids, generate_batch(ckpt.params, cfg, batch, mode, beam_width),
                                 batch.captions):
            ids.append(sid)
            hyps.append(caption_words(gen, ckpt.vocab))
            refs.append(caption_words(cap, ckpt.vocab))
    report = score_corpus(hyps, refs, ids)
    if out is not None:
        report.save(out)
        Path(f"{os.fspath(out)}.txt").write_text(report.table() + "\n", encoding="utf-8")
    return report


def read_loss_log(path: str | os.PathLike) -> list[tuple[int, int, str, float]]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(io.StringIO(fh.read())))
    if not rows or ",".join(rows[0]) != LOG_HEADER:
        raise ValueError(f"{path}: not a loss log")
    return [(int(e), int(s), sp, float(v)) for e, s, sp, v in rows[1:]]
