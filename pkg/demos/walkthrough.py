"""Train a toy codec end to end, then follow one image through the bitstream.

Runs in a few minutes on one CPU core:

    python demos/walkthrough.py --out /tmp/rrd_demo

Writes stage-1 and stage-2 checkpoints, one compressed file and the decoded
image, and prints where the bits go.
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from rrdcodec import bitstream
from rrdcodec.data import save_image, toy_corpus
from rrdcodec.metrics import psnr
from rrdcodec.nets import ModelConfig, save_checkpoint
from rrdcodec.training import TrainConfig, encode_corpus, evaluate_heldout, pretrain_foundation, train_stage1, train_stage2


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="rrd_demo")
    ap.add_argument("--quick", action="store_true", help="tiny budget, just to see it run")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    cfg = TrainConfig()
    if args.quick:
        cfg = replace(cfg, ae_iters=200, base_iters=200, warmup_iters=100, iters=100, stage2_iters=30, corpus_size=256)
    images = toy_corpus(cfg.corpus_size, seed=0)
    held = toy_corpus(16, seed=1, split="heldout")

    t = time.perf_counter()
    model = pretrain_foundation(ModelConfig(), images, cfg)
    latents = encode_corpus(model, images)
    print(f"autoencoder and base denoiser trained in {time.perf_counter() - t:.0f}s")

    train_stage1(model, latents, cfg)
    print("stage I   held-out", evaluate_heldout(model, held, L=2))
    save_checkpoint(model, out / "stage1.npz", {"stage": "1", "lambda_r": cfg.lambda_r, "L": 2})
    train_stage2(model, images, latents, replace(cfg, stage="2"))
    print("stage II  held-out", evaluate_heldout(model, held, L=2))
    save_checkpoint(model, out / "stage2.npz", {"stage": "2", "lambda_r": cfg.lambda_r, "L": 2})

    # one image through the file format
    x = held[0]
    data = bitstream.compress_array(x, model, L=2, lambda_r=cfg.lambda_r)
    (out / "image.rdei").write_bytes(data)
    h = bitstream.read_header(data)
    print(f"\n{h.width}x{h.height} image -> {len(data)} bytes ({h.bpp:.3f} bpp)")
    print(f"  header {bitstream.HEADER_SIZE} B, VQ indices {h.vq_bytes} B, latent {h.y_bytes} B")

    x_hat, _, code = bitstream.decompress_array(data, model, return_code=True)
    save_image(x, out / "original.png")
    save_image(x_hat, out / "decoded.png")
    print(f"  PSNR {psnr(x_hat, x):.2f} dB")
    bits = bitstream.bit_allocation(code)
    print(f"  estimated latent bits per position: min {bits.min():.1f}, max {bits.max():.1f}, "
          f"total {bits.sum():.0f}")

    for L in (1, 2, 5, 20):
        y = bitstream.decompress_array(data, model, L=L)
        print(f"  L={L:<3d} PSNR {psnr(y, x):.2f} dB")
    print(f"\nwrote {out}/stage1.npz, stage2.npz, image.rdei, original.png, decoded.png")


if __name__ == "__main__":
    main()
