"""Command line entry point ``rrd``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("rrd")


def _model_defaults(header: dict) -> dict:
    meta = header.get("meta", {})
    return {"L": int(meta.get("L", 2)), "lambda_r": float(meta.get("lambda_r", float("nan")))}


def cmd_compress(args) -> int:
    from .bitstream import compress
    from .nets import load_checkpoint

    model, header = load_checkpoint(args.model)
    d = _model_defaults(header)
    h = compress(args.input, args.output, model, L=args.steps or d["L"], lambda_s=args.lambda_s,
                 seed=args.seed, lambda_r=d["lambda_r"], raw=args.raw)
    print(f"{args.output}: {h.width}x{h.height}, {h.total_bytes} bytes, {h.bpp:.4f} bpp")
    return 0


def cmd_decompress(args) -> int:
    from .bitstream import decompress
    from .nets import load_checkpoint

    model, _ = load_checkpoint(args.model)
    h = decompress(args.input, args.output, model, L=args.steps, lambda_s=args.lambda_s)
    print(f"{args.output}: {h.width}x{h.height}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import Grid, evaluate

    grid = Grid.load(args.grid)
    if args.out:
        grid.out = args.out
    print(evaluate(args.directory, grid))
    return 0


def _training_images(args, cfg) -> np.ndarray:
    from .data import load_image, toy_corpus

    if args.data is None:
        return toy_corpus(cfg.corpus_size, seed=cfg.seed)
    files = sorted(p for p in Path(args.data).iterdir() if p.suffix.lower() in (".png", ".ppm", ".pnm"))
    if not files:
        raise SystemExit(f"no training images in {args.data}")
    images = [load_image(p) for p in files]
    if len({im.shape for im in images}) != 1:
        raise SystemExit("training images must share one size")
    return np.stack(images)


def cmd_train(args) -> int:
    from .training import load_config, train

    cfg, model_cfg = load_config(args.config)
    cfg.stage = str(args.stage)
    out = Path(args.out or f"stage{cfg.stage}.npz")
    metrics = args.metrics or out.with_suffix(".jsonl")
    train(cfg, _training_images(args, cfg), init=args.init, out=out, metrics_path=metrics, model_cfg=model_cfg)
    print(f"wrote {out} and {metrics}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rrd", description="Relay residual diffusion image codec")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compress", help="encode an 8-bit PNG/PPM image")
    c.add_argument("input")
    c.add_argument("-o", "--output", required=True)
    c.add_argument("--model", required=True, help="checkpoint (.npz)")
    c.add_argument("--steps", type=int, default=None, help="default step count stored in the header")
    c.add_argument("--lambda-s", type=float, default=1.0, help="default guidance stored in the header")
    c.add_argument("--seed", type=int, default=0, help="decode noise seed")
    c.add_argument("--raw", action="store_true", help="write symbols uncompressed (escape-only mode)")
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="decode a bitstream to PNG/PPM")
    d.add_argument("input")
    d.add_argument("-o", "--output", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--steps", type=int, default=None, help="override the header step count L")
    d.add_argument("--lambda-s", type=float, default=None, help="override the header guidance scale")
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="evaluate checkpoints over a directory of images")
    e.add_argument("directory")
    e.add_argument("--grid", required=True, help="JSON grid: models, L, lambda_s, seed, out, tile")
    e.add_argument("--out", default=None, help="output directory (overrides the grid)")
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True, help="JSON with 'train' and 'model' sections")
    t.add_argument("--stage", choices=("1", "2"), required=True)
    t.add_argument("--init", default=None, help="checkpoint to start from (required for stage 2)")
    t.add_argument("--out", default=None, help="output checkpoint path")
    t.add_argument("--metrics", default=None, help="line-delimited JSON metrics log")
    t.add_argument("--data", default=None, help="directory of equally sized training images")
    t.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"rrd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
