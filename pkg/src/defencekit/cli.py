"""Command-line surface: make-data, train-seg, train-inpaint, eval-seg,
infer and grad-check.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every subcommand
takes `--config <path>` plus repeatable `--set key=value` overrides and a
`--seed` shortcut.
"""

from __future__ import annotations

import argparse
import sys

from .certify import certify_gradients
from .config import ConfigError, TrainConfig, apply_overrides, parse_config_file


def _common_flags(sub):
    sub.add_argument("--config", help="flat key = value configuration file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override one configuration key")
    sub.add_argument("--seed", type=int, help="random seed override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="defencekit",
        description="Fence-occlusion segmentation and generative inpainting")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("make-data", help="generate a synthetic dataset")
    _common_flags(p)
    p.add_argument("--out", default="data", help="output directory")
    p.add_argument("--samples", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--mask-kind", choices=("fence", "freeform", "mixed"), default="fence")

    p = subs.add_parser("train-seg", help="train the occlusion segmenter")
    _common_flags(p)

    p = subs.add_parser("train-inpaint", help="train the inpainting GAN")
    _common_flags(p)

    p = subs.add_parser("eval-seg", help="evaluate a segmentation checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", default="report.csv")
    p.add_argument("--pr-curve", default="pr_curve.csv")
    p.add_argument("--split", default="eval")

    p = subs.add_parser("infer", help="segment and/or inpaint one image")
    _common_flags(p)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", help="inpainting checkpoint")
    p.add_argument("--seg-checkpoint", help="segmentation checkpoint")
    p.add_argument("--mask", help="known occlusion mask (skips segmentation)")
    p.add_argument("--out", default="infer_out")

    p = subs.add_parser("grad-check", help="finite-difference certification of all ops")
    _common_flags(p)
    p.add_argument("--instances", type=int, default=20)

    return parser


def _load_config(args) -> TrainConfig:
    values = parse_config_file(args.config) if args.config else {}
    values = apply_overrides(values, args.overrides)
    if args.seed is not None:
        values["seed"] = str(args.seed)
    return TrainConfig.from_values(values)


def _run(args) -> int:
    if args.command == "make-data":
        from .data import DataConfig, build_dataset
        from .tensor import Rng
        seed = args.seed if args.seed is not None else 0
        cfg = DataConfig(n_samples=args.samples, size=(args.size, args.size),
                         mask_kind=args.mask_kind)
        manifest = build_dataset(cfg, Rng(seed, "data"), args.out)
        print(f"wrote {len(manifest.samples)} samples to {args.out}")
        return 0

    if args.command == "train-seg":
        from .train import train_segmentation
        cfg = _load_config(args)
        cfg.task = "segmentation"
        result = train_segmentation(cfg)
        print(f"checkpoint: {result.checkpoint_path}")
        print(f"final loss: {result.loss_log[-1][2]:.6f}")
        return 0

    if args.command == "train-inpaint":
        from .train import train_inpainting
        cfg = _load_config(args)
        cfg.task = "inpainting"
        result = train_inpainting(cfg)
        print(f"checkpoint: {result.checkpoint_path}")
        rec = [v for _, term, v in result.loss_log if term == "rec"]
        print(f"rec loss: first {rec[0]:.6f} last {rec[-1]:.6f}")
        return 0

    if args.command == "eval-seg":
        from .train import evaluate_segmentation
        report = evaluate_segmentation(args.checkpoint, args.manifest,
                                       args.report, args.pr_curve, args.split)
        print(f"precision={report.mean_precision:.4f} recall={report.mean_recall:.4f} "
              f"f={report.mean_f:.4f} mae={report.mean_mae:.4f}")
        return 0

    if args.command == "infer":
        from .train import infer
        result = infer(args.checkpoint, args.image, args.mask,
                       args.seg_checkpoint, args.out)
        for kind, path in result.outputs.items():
            print(f"{kind}: {path}")
        return 0

    if args.command == "grad-check":
        results = certify_gradients(instances=args.instances,
                                    seed=args.seed if args.seed is not None else 0,
                                    report=print)
        return 0 if all(v <= 1e-4 for v in results.values()) else 1

    raise AssertionError(f"unhandled command {args.command}")  # pragma: no cover


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:  # console-script entry point
    sys.exit(cli_main())
