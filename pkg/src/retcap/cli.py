"""Command-line entry point: ``retcap <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gten
from .config import ModelConfig
from .data import load_dataset, preprocess_text
from .gradcheck import BLOCKS, GRAD_TOLERANCE, check_block
from .model import Batch, encode, generate_batch
from .train import evaluate, load_checkpoint, train
from .vision import GateMap, export_gate_map


def _config(path: str | None, seed: int | None = None) -> ModelConfig:
    cfg = ModelConfig.load(path) if path else ModelConfig()
    return cfg.replace(seed=seed) if seed is not None else cfg.validate()


def _single_batch(ckpt, image: str, keywords: str) -> Batch:
    cfg = ckpt.config
    visual = gten.load(image).astype(cfg.np_dtype)
    ids = np.array([ckpt.vocab.encode(preprocess_text(keywords))], dtype=np.int64)
    if ids.size == 0:
        raise SystemExit("error: no keywords after preprocessing")
    return Batch([Path(image).stem], visual[None], ids, np.zeros((1, 0), dtype=np.int64))


def cmd_train(args) -> int:
    cfg = _config(args.config, args.seed)
    dataset = load_dataset(args.data, cfg)
    result = train(cfg, dataset, args.out, resume=args.resume)
    print(f"trained to step {result.checkpoint.step}; loss log {result.loss_log}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data, ckpt.config, vocab=ckpt.vocab)
    report = evaluate(ckpt, dataset.split(args.split), out=args.out,
                      mode="beam" if args.beam > 1 else "greedy", beam_width=args.beam)
    print(report.table())
    return 0


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    batch = _single_batch(ckpt, args.image, args.keywords)
    mode = "beam" if args.beam > 1 else "greedy"
    ids = generate_batch(ckpt.params, ckpt.config, batch, mode, args.beam)[0]
    sys.stdout.write(f"{batch.ids[0]}\t{' '.join(ckpt.vocab.decode(ids))}\n")
    return 0


def cmd_export_attn(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.config.ablation != "none":
        raise SystemExit("error: this checkpoint has no vision branch")
    batch = _single_batch(ckpt, args.image, args.keywords)
    from .tensor import no_grad
    with no_grad():
        gate = encode(ckpt.params, ckpt.config, batch.visual, batch.keywords).gate
    gmap = GateMap(gate.data[0], sample_id=batch.ids[0], checkpoint_id=Path(args.checkpoint).name)
    export_gate_map(gmap, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_synth(args) -> int:
    from .data import generate_synthetic
    cfg = _config(args.config)
    manifest = generate_synthetic(cfg, args.n, args.seed, args.out)
    print(f"wrote {manifest}")
    return 0


def cmd_check_grad(args) -> int:
    names = list(BLOCKS) if args.block == "all" else [args.block]
    failed = False
    for name in names:
        err, secs = check_block(name, args.seed)
        ok = err <= GRAD_TOLERANCE
        failed |= not ok
        print(f"{name:12s} max_rel_err={err:.3e}  {'PASS' if ok else 'FAIL'}  ({secs:.1f}s)")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="retcap", description="Keyword-guided retinal image captioning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model on a manifest")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score greedy captions on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=["train", "val", "test", "all"], default="val")
    s.add_argument("--out", required=True)
    s.add_argument("--beam", type=int, default=1)
    s.set_defaults(func=cmd_eval)

    for name, func, help_ in (("generate", cmd_generate, "caption one image"),
                              ("export-attn", cmd_export_attn, "write the gate map as a PGM heatmap")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--image", required=True, help="GTEN image or feature tensor")
        s.add_argument("--keywords", required=True)
        if name == "generate":
            s.add_argument("--beam", type=int, default=1)
        else:
            s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("check-grad", help="finite-difference check of each block")
    s.add_argument("--block", choices=[*BLOCKS, "all"], default="all")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_check_grad)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
