"""Command line entry point: ``mivid <command> ...``."""

from __future__ import annotations

import argparse
import logging
import random
import sys
from pathlib import Path

import torch

from mivid.errors import MividError

logger = logging.getLogger("mivid")


def cmd_make_toy_data(args):
    from mivid.videodata import make_toy_dataset

    make_toy_dataset(args.out, args.n, args.frames, args.height, args.width, args.seed)
    print(f"wrote {args.n} sequences to {args.out}")


def cmd_train(args):
    from mivid.engine.config import load_config
    from mivid.engine.train import train

    cfg = load_config(args.config)
    ckpt = train(cfg, resume=args.resume, max_steps=args.max_steps, out_dir=args.out_dir)
    last = ckpt.loss_history[-1] if ckpt.loss_history else None
    print(f"step {ckpt.step} epoch {ckpt.epoch}" + (f" loss {last[3]:.6f}" if last else ""))


def cmd_interpolate(args):
    from mivid.engine.infer import interpolate

    manifest = interpolate(args.checkpoint, args.input, args.out, args.sigma_mode, args.seed, args.mask, args.n_between)
    n_new = sum(o["synthesized"] for o in manifest["outputs"])
    print(f"wrote {n_new} synthesized frame(s) to {args.out}")


def cmd_eval(args):
    from mivid.features import get_backend
    from mivid.metrics import evaluate_directory

    report = evaluate_directory(args.pred, args.gt, args.center_only, get_backend(args.backend), args.out)
    agg = report.aggregate
    print(f"{len(report.per_frame)} frames  PSNR {agg['psnr_db']:.3f} dB  SSIM {agg['ssim']:.4f}  LPIPS {agg['lpips']:.4f}")


def cmd_mask_demo(args):
    from mivid.engine.config import load_config
    from mivid.viz import mask_grid

    cfg = load_config(args.config)
    mask_grid(cfg, args.out, rows=args.rows, seed=args.seed)
    print(f"wrote {args.out}")


def cmd_plot(args):
    from mivid.viz import plot_history

    plot_history(args.history, args.out)
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mivid", description="Masked diffusion video frame interpolation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-toy-data", help="write a synthetic moving-square dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--frames", type=int, default=7)
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--seed", type=int, default=42)
    s.set_defaults(func=cmd_make_toy_data)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", default=None, help="checkpoint to continue from")
    s.add_argument("--max-steps", type=int, default=None)
    s.add_argument("--out-dir", default=None, help="overrides train.out_dir")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("interpolate", help="synthesize intermediate frames")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="directory of context frames")
    s.add_argument("--out", required=True)
    s.add_argument("--sigma-mode", choices=("zero", "posterior"), default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mask", default=None, help='frames to synthesize, e.g. "0001000" or "3"')
    s.add_argument("--n-between", type=int, default=1)
    s.set_defaults(func=cmd_interpolate)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="CSV report path")
    s.add_argument("--center-only", action="store_true")
    s.add_argument("--backend", default="proxy")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("mask-demo", help="render hybrid mask patterns as an image grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rows", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_mask_demo)

    s = sub.add_parser("plot", help="plot the loss history")
    s.add_argument("--history", required=True, help="checkpoint or train_log.csv")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MividError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
