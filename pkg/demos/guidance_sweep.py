"""How the guidance scale moves a reconstruction away from the base model.

    python demos/guidance_sweep.py rrd_demo/stage2.npz

The encoded file is fixed; only the decoder-side blend changes. lambda_s = 0
uses the unconditional denoiser alone, 1 the conditional one alone, and
values above 1 extrapolate past it.
"""
import sys

import numpy as np

from rrdcodec import bitstream
from rrdcodec.data import toy_corpus
from rrdcodec.evaluate import LAMBDA_S_SWEEP, distance_D
from rrdcodec.metrics import psnr
from rrdcodec.nets import load_checkpoint


def main(ckpt):
    model, _ = load_checkpoint(ckpt)
    held = toy_corpus(8, seed=1, split="heldout")
    streams = [bitstream.compress_array(x, model) for x in held]
    print(f"{'lambda_s':>8}  {'D':>10}  {'PSNR':>7}")
    base = None
    for s in LAMBDA_S_SWEEP:
        recon = np.stack([bitstream.decompress_array(d, model, lambda_s=s) for d in streams])
        base = recon if base is None else base
        print(f"{s:8.2f}  {distance_D(recon, base):10.3e}  {psnr(recon, held):7.2f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "rrd_demo/stage2.npz")
