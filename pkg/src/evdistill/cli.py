"""Command-line surface: dataset generation, training, evaluation, export.

Every subcommand reads an optional ``--config`` key=value file and applies
``--set key=value`` overrides on top (see config.DistillConfig for the keys).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import DistillConfig, load_config
from .synth import load_dataset, save_dataset
from .train import evaluate_checkpoint, export_heatmap, run_training


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )


def _config(args) -> DistillConfig:
    return load_config(args.config, args.overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evdistill",
        description="cross-modality object-centric distillation for event detection",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the paired synthetic dataset")
    _add_config_args(p)

    p = sub.add_parser("train-teacher", help="train the grayscale teacher")
    _add_config_args(p)
    p.add_argument("--out", default="runs", help="output directory")

    p = sub.add_parser("distill", help="distill the event student from a teacher")
    _add_config_args(p)
    p.add_argument("--teacher", required=True, help="teacher checkpoint path")
    p.add_argument("--out", default="runs")

    p = sub.add_parser("train-baseline", help="train the event student without distillation")
    _add_config_args(p)
    p.add_argument("--out", default="runs")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=["train", "val"])

    p = sub.add_parser("heatmap", help="export a pyramid-level activation heatmap")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0, help="sample id from the val split")
    p.add_argument("--level", type=int, default=0, choices=[0, 1, 2])
    p.add_argument("--out", required=True, help="output PGM path")

    p = sub.add_parser("encode-check", help="verify the fast encoder against the reference")
    _add_config_args(p)
    p.add_argument("--encoder-bin", required=True, help="path to the fast encoder CLI")
    p.add_argument("--streams", type=int, default=100)
    p.add_argument("--rng-seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _config(args)

    if args.command == "gen-data":
        save_dataset(cfg, cfg.data_dir)
        total = cfg.train_samples + cfg.val_samples
        print(f"wrote {total} samples under {cfg.data_dir}")
        return 0

    if args.command in ("train-teacher", "train-baseline", "distill"):
        mode = {
            "train-teacher": "teacher",
            "train-baseline": "baseline",
            "distill": "distill",
        }[args.command]
        teacher = getattr(args, "teacher", None)
        result = run_training(cfg, mode, args.out, teacher_ckpt=teacher)
        print(
            f"{mode}: checkpoint {result.checkpoint_path} "
            f"val mAP {result.val.map:.4f} AP50 {result.val.ap50:.4f} "
            f"AP75 {result.val.ap75:.4f}"
        )
        return 0

    if args.command == "eval":
        res = evaluate_checkpoint(args.checkpoint, cfg.data_dir, args.split)
        print(f"split={args.split} mAP={res.map:.4f} AP50={res.ap50:.4f} AP75={res.ap75:.4f}")
        for cat, (m, a50, a75) in sorted(res.per_category.items()):
            print(f"  category {cat}: mAP={m:.4f} AP50={a50:.4f} AP75={a75:.4f}")
        return 0

    if args.command == "heatmap":
        samples = load_dataset(cfg.data_dir, "val")
        match = [s for s in samples if s.sample_id == args.sample]
        if not match:
            print(f"sample {args.sample} not in val split", file=sys.stderr)
            return 1
        export_heatmap(args.checkpoint, match[0], args.out, level=args.level)
        print(f"wrote {args.out}")
        return 0

    if args.command == "encode-check":
        from .encode_check import run_encode_check

        failures = run_encode_check(
            args.encoder_bin, cfg, streams=args.streams, seed=args.rng_seed
        )
        return 1 if failures else 0

    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
