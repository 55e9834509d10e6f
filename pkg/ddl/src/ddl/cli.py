"""Command line entry points: `ddl train` and `ddl enhance`."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io, model, train


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddl",
                                     description="dictionary-generating volume upsampler")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit a model on a paired-volume manifest")
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--atoms", type=int, default=16)
    p_train.add_argument("--steps", type=int, default=500)
    p_train.add_argument("--scale", default="1,1,4", help="upsampling factors i,j,k")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--batch", type=int, default=2)

    p_enh = sub.add_parser("enhance", help="upscale one volume with a trained model")
    p_enh.add_argument("--ckpt", required=True)
    p_enh.add_argument("--in", dest="input", required=True)
    p_enh.add_argument("--out", required=True)
    return parser


def _parse_scale(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise model.ParameterError(f"scale needs three factors, got {text!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise model.ParameterError(f"bad scale {text!r}") from exc


def _cmd_train(args) -> int:
    cfg = model.DdlConfig(n_atoms=args.atoms, scale=_parse_scale(args.scale),
                          steps=args.steps, seed=args.seed, batch_size=args.batch)
    pairs = train.load_pairs(args.manifest)
    result = train.train(pairs, cfg, args.out)
    print(f"steps = {result.steps}")
    print(f"final_loss = {result.final_loss:.6f}")
    print(f"checkpoint = {result.checkpoint_path}")
    return 0


def _cmd_enhance(args) -> int:
    net = train.load_checkpoint(args.ckpt)
    low, spacing = io.load_volume(args.input)
    out = train.enhance_volume(net, low)
    out_spacing = tuple(sp / s for sp, s in zip(spacing, net.cfg.scale))
    io.save_volume(out, args.out, spacing=out_spacing)
    print(f"wrote {args.out} dims = {out.shape}")
    return 0


def entry(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "train":
            return _cmd_train(args)
        return _cmd_enhance(args)
    except model.ParameterError as exc:
        print(f"parameter error: {exc}", file=sys.stderr)
        return 2
    except (io.IoError, model.ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(entry())
