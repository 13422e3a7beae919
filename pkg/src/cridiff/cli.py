"""Command-line entry points: pretrain/train/predict/evaluate/decouple/ablate/plot/gen-data.

Configuration comes from an optional JSON file (--config) plus repeated
key=value overrides (-o). Exit codes: 0 success, 2 validation error, 1
runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data, train
from .config import ConfigError, load_config


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    p.add_argument(
        "-o", "--override", action="append", default=[], metavar="KEY=VALUE",
        help="config override, repeatable",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cridiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("root", help="output dataset root")
    p.add_argument("-n", type=int, default=200, help="number of phantoms")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", action="store_true")

    p = sub.add_parser("pretrain", help="generative pretraining on images")
    _add_config_args(p)

    p = sub.add_parser("train", help="joint conditioner + denoiser training")
    _add_config_args(p)
    p.add_argument("--resume", help="resume from a training checkpoint")

    p = sub.add_parser("predict", help="ensemble segmentation of an image directory")
    _add_config_args(p)
    p.add_argument("checkpoint")
    p.add_argument("input_dir")
    p.add_argument("output_dir")

    p = sub.add_parser("evaluate", help="metrics CSV for prediction vs ground truth")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--percentile", type=float, default=100.0,
                   help="Hausdorff percentile (100 = max)")

    p = sub.add_parser("decouple", help="write soft boundary/core labels for masks")
    p.add_argument("mask_dir")
    p.add_argument("output_dir")

    p = sub.add_parser("ablate", help="train and compare variants along one axis")
    _add_config_args(p)
    p.add_argument("axis", choices=sorted(train.ABLATION_AXES))

    p = sub.add_parser("plot", help="render figures from a run directory's CSVs")
    p.add_argument("run_dir")
    p.add_argument("--out")

    p = sub.add_parser("dump-grids", help="dump conditioner feature grids as PNGs")
    _add_config_args(p)
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("output_dir")
    return parser


def run(args) -> int:
    if args.command == "gen-data":
        spec = data.PhantomSpec(size=(args.size, args.size), texture=args.texture)
        data.write_dataset(args.root, args.n, spec, args.seed)
        print(f"wrote {args.n} phantom pairs under {args.root}")
        return 0

    if args.command == "evaluate":
        ids, reports = train.run_evaluate(
            args.pred_dir, args.gt_dir, args.out, args.percentile
        )
        print(f"evaluated {len(ids)} cases -> {args.out}")
        return 0

    if args.command == "decouple":
        n = train.run_decouple(args.mask_dir, args.output_dir)
        print(f"decoupled {n} masks -> {args.output_dir}")
        return 0

    if args.command == "plot":
        made = train.run_plot(args.run_dir, args.out)
        for p in made:
            print(f"wrote {p}")
        return 0

    cfg = load_config(args.config, args.override)
    if args.command == "pretrain":
        ckpt = train.run_pretrain(cfg)
        print(f"pretrain checkpoint: {ckpt}")
    elif args.command == "train":
        ckpt = train.run_train(cfg, resume=args.resume)
        print(f"training checkpoint: {ckpt}")
    elif args.command == "predict":
        stems = train.run_predict(cfg, args.checkpoint, args.input_dir, args.output_dir)
        print(f"predicted {len(stems)} images -> {args.output_dir}")
    elif args.command == "ablate":
        table = train.run_ablate(cfg, args.axis)
        print(f"ablation table: {table}")
        print(Path(table).read_text())
    elif args.command == "dump-grids":
        import torch

        cond_net, _, _, _, _ = train.load_trained(args.checkpoint)
        img = torch.from_numpy(data.load_image01(args.image)).float()[None, None]
        out = train.dump_grids(cond_net, img, args.output_dir)
        print(f"grids dumped under {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
