"""Command-line entry point: ``tlkit {annotate,train,eval,gradcheck,ab}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .errors import TLKitError
from .gradcheck import gradcheck_model
from .scoremap import annotate, densify, load_scoremap_dir, sparsify_topk, write_manifest, write_scoremap
from .synth import DatasetConfig, SynthDataset, oracle_annotator
from .trainer import TrainConfig, Trainer, evaluate_split, run_ab
from .vit import ModelConfig, desk_config, load_checkpoint, tiny_config


def _read(path):
    with open(path) as f:
        return f.read()


def _dataset(path):
    return DatasetConfig.from_text(_read(path)) if path else DatasetConfig()


def _model(path):
    return ModelConfig.from_text(_read(path)) if path else desk_config()


def _train_cfg(path):
    return TrainConfig.from_text(_read(path)) if path else TrainConfig()


def cmd_annotate(args):
    cfg = _dataset(args.dataset)
    os.makedirs(args.out, exist_ok=True)
    annotator = oracle_annotator(cfg)
    rows = []
    splits = ("train", "val") if args.split == "all" else (args.split,)
    for split in splits:
        ds = SynthDataset(cfg, split)
        for i in range(len(ds)):
            sample = ds[i]
            sparse = sparsify_topk(annotate(annotator, sample), args.topk)
            rel = f"{sample.sample_id:07d}.tlsm"
            write_scoremap(os.path.join(args.out, rel), sparse)
            rows.append((sample.sample_id, rel, sample.class_label))
    write_manifest(os.path.join(args.out, "manifest.tsv"), rows)
    print(f"wrote {len(rows)} score maps to {args.out}")
    return 0


def cmd_train(args):
    dcfg, mcfg, tcfg = _dataset(args.dataset), _model(args.model), _train_cfg(args.train)
    train_ds = SynthDataset(dcfg, "train")
    store = None
    if tcfg.token_labeling_enabled:
        if not args.scoremaps:
            raise TLKitError("--scoremaps is required when token labeling is enabled")
        store = {sid: densify(sp) for sid, sp in load_scoremap_dir(args.scoremaps).items()}
    result = Trainer(mcfg, tcfg, train_ds, store, out_dir=args.out).train()
    val = SynthDataset(dcfg, "val")
    if len(val):
        print(f"top1={evaluate_split(result.params, mcfg, val):.4f}")
    return 0


def cmd_eval(args):
    mcfg, params = load_checkpoint(args.checkpoint)
    ds = SynthDataset(_dataset(args.dataset), args.split)
    print(f"top1={evaluate_split(params, mcfg, ds):.4f}")
    return 0


def cmd_gradcheck(args):
    mcfg = ModelConfig.from_text(_read(args.model)) if args.model else tiny_config()
    report = gradcheck_model(mcfg, seed=args.seed, eps=args.eps)
    for name, err in report.worst.items():
        print(f"{name}\t{err:.3e}\t{'ok' if err <= args.tol else 'FAIL'}")
    ok = report.passed(args.tol)
    print(f"max_rel_error={report.max_error:.3e} tol={args.tol:g} time={report.seconds:.1f}s {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_ab(args):
    dcfg, mcfg, tcfg = _dataset(args.dataset), _model(args.model), _train_cfg(args.train)
    seeds = list(range(args.seed0, args.seed0 + args.seeds))
    rows = run_ab(dcfg, mcfg, tcfg, seeds, workers=args.workers)
    print("seed\ttop1_with_tl\ttop1_without_tl\tdelta")
    for seed, with_tl, without in rows:
        print(f"{seed}\t{with_tl:.4f}\t{without:.4f}\t{with_tl - without:+.4f}")
    w = np.array([r[1] for r in rows])
    wo = np.array([r[2] for r in rows])
    print(f"mean\t{w.mean():.4f}\t{wo.mean():.4f}\t{(w - wo).mean():+.4f}")
    print(f"median_paired_delta={np.median(w - wo):+.4f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="tlkit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("annotate", help="write oracle score maps (TLSM) and a manifest")
    a.add_argument("--dataset")
    a.add_argument("--out", required=True)
    a.add_argument("--topk", type=int, default=5)
    a.add_argument("--split", choices=("train", "val", "all"), default="train")
    a.set_defaults(func=cmd_annotate)

    t = sub.add_parser("train", help="train a model; writes metrics.log and checkpoint.tlck")
    t.add_argument("--dataset")
    t.add_argument("--scoremaps")
    t.add_argument("--model")
    t.add_argument("--train")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset")
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    g.add_argument("--model")
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("ab", help="paired training with and without token labeling")
    b.add_argument("--seeds", type=int, default=5)
    b.add_argument("--seed0", type=int, default=0)
    b.add_argument("--dataset")
    b.add_argument("--model")
    b.add_argument("--train")
    b.add_argument("--workers", type=int)
    b.set_defaults(func=cmd_ab)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TLKitError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

