"""Evaluation grid: rate, distortion, guidance sweeps, bit maps and timing."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import bitstream
from .data import load_image, save_image
from .metrics import ms_ssim, psnr
from .nets import RRDModel, load_checkpoint

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")
LAMBDA_S_SWEEP = (0.0, 0.6, 0.8, 1.0, 1.3, 1.5)
CSV_FIELDS = (
    "model", "lambda_r", "image", "L", "lambda_s", "bpp", "psnr", "ms_ssim", "mse",
    "D", "denoise_seconds", "step_seconds", "tiling", "error",
)


class _TimedDenoisers:
    """Wraps a denoiser pair and records the wall-clock time of each sampler step."""

    def __init__(self, inner):
        self.inner = inner
        self.calls: list[float] = []

    def _timed(self, fn, *args):
        t = time.perf_counter()
        out = fn(*args)
        self.calls.append(time.perf_counter() - t)
        return out

    def cond(self, z, c, n):
        return self._timed(self.inner.cond, z, c, n)

    def base(self, z, n):
        return self._timed(self.inner.base, z, n)


@torch.no_grad()
def time_denoising(model: RRDModel, z_c, c, L: int, lambda_s: float = 1.0, seed: int = 0,
                   repeats: int = 3) -> dict:
    """Best-of-``repeats`` wall-clock time of the reverse loop (no entropy coding)."""
    from .sampler import reconstruct

    best, steps = float("inf"), []
    for _ in range(repeats):
        timed = _TimedDenoisers(model.denoisers())
        t = time.perf_counter()
        reconstruct(z_c, c, model.plan(L), lambda_s, seed, timed, model.schedule, start=model.cfg.start)
        elapsed = time.perf_counter() - t
        if elapsed < best:
            best, steps = elapsed, timed.calls
    return {"seconds": best, "step_seconds": steps}


def distance_D(x, x_base) -> float:
    """Mean squared difference to the lambda_s = 0 reconstruction."""
    return float(np.mean((np.asarray(x, np.float64) - np.asarray(x_base, np.float64)) ** 2))


def upsample_nearest(a: np.ndarray, size) -> np.ndarray:
    h, w = size
    ry, rx = -(-h // a.shape[0]), -(-w // a.shape[1])
    return np.repeat(np.repeat(a, ry, axis=0), rx, axis=1)[:h, :w]


def bit_map_image(bits: np.ndarray) -> np.ndarray:
    """Grayscale (3, H, W) rendering of a bit map, brightest where most bits go."""
    peak = float(bits.max()) if bits.size and bits.max() > 0 else 1.0
    return np.repeat((bits / peak)[None], 3, axis=0).astype(np.float32)


@dataclass
class Grid:
    """Evaluation grid read from JSON.

    ``models`` maps a label to a checkpoint path. ``L`` and ``lambda_s`` list
    decode settings; ``tile`` > 0 codes non-overlapping tiles independently.
    """

    models: dict[str, str]
    L: list[int] = field(default_factory=lambda: [2])
    lambda_s: list[float] = field(default_factory=lambda: list(LAMBDA_S_SWEEP))
    seed: int = 0
    out: str = "eval_out"
    tile: int = 0
    bit_maps: bool = True

    @classmethod
    def load(cls, path) -> "Grid":
        d = json.loads(Path(path).read_text())
        if isinstance(d.get("models"), list):
            d["models"] = {Path(p).stem: p for p in d["models"]}
        base = Path(path).parent
        d["models"] = {k: str((base / v) if not Path(v).is_absolute() else v) for k, v in d["models"].items()}
        return cls(**d)


def _tiles(x: np.ndarray, tile: int):
    h, w = x.shape[-2:]
    for i in range(0, h, tile):
        for j in range(0, w, tile):
            yield (i, j), x[:, i : i + tile, j : j + tile]


def _code_image(x, model, L, seed, lambda_r, tile):
    """Compress (optionally per tile); returns list of ((i, j), bytes)."""
    parts = _tiles(x, tile) if tile else [((0, 0), x)]
    return [(pos, bitstream.compress_array(p, model, L=L, seed=seed, lambda_r=lambda_r)) for pos, p in parts]


def _decode_image(coded, shape, model, L, lambda_s):
    out = np.zeros(shape, dtype=np.float32)
    seconds = 0.0
    codes = []
    for (i, j), data in coded:
        t = time.perf_counter()
        x, _, code = bitstream.decompress_array(data, model, L=L, lambda_s=lambda_s, return_code=True)
        seconds += time.perf_counter() - t
        out[:, i : i + x.shape[1], j : j + x.shape[2]] = x
        codes.append(((i, j), code))
    return out, seconds, codes


def evaluate_model(label: str, model: RRDModel, lambda_r: float, images: dict[str, np.ndarray],
                   grid: Grid, out_dir: Path | None = None) -> list[dict]:
    rows = []
    for name, x in images.items():
        base = {"model": label, "lambda_r": lambda_r, "image": name,
                "tiling": f"nonoverlap-{grid.tile}" if grid.tile else "none"}
        try:
            coded = _code_image(x, model, grid.L[0], grid.seed, lambda_r, grid.tile)
        except Exception as exc:
            log.error("encode failed for %s with %s: %s", name, label, exc)
            rows.append({**base, "error": f"encode: {exc}"})
            continue
        nbytes = sum(len(d) for _, d in coded)
        bpp = 8.0 * nbytes / (x.shape[1] * x.shape[2])
        for L in grid.L:
            x_base = None
            for s in sorted(grid.lambda_s):
                row = {**base, "L": L, "lambda_s": s, "bpp": bpp}
                try:
                    x_hat, seconds, codes = _decode_image(coded, x.shape, model, L, s)
                    if x_base is None and s == 0.0:
                        x_base = x_hat
                    row.update(
                        psnr=psnr(x_hat, x), ms_ssim=ms_ssim(x_hat, x), mse=float(np.mean((x_hat - x) ** 2)),
                        D=distance_D(x_hat, x_base) if x_base is not None else "",
                        denoise_seconds=seconds,
                    )
                    code = codes[0][1]
                    steps = time_denoising(model, code.z_c, code.c, L, s, grid.seed, repeats=1)["step_seconds"]
                    row["step_seconds"] = json.dumps([round(t, 6) for t in steps])
                    if out_dir is not None:
                        save_image(x_hat, out_dir / f"{label}_{Path(name).stem}_L{L}_s{s:g}.png")
                        if grid.bit_maps and L == grid.L[0] and s == sorted(grid.lambda_s)[0]:
                            bmap = np.zeros(x.shape[1:], dtype=np.float64)
                            for (i, j), code in codes:
                                tile = bmap[i : i + (grid.tile or x.shape[1]), j : j + (grid.tile or x.shape[2])]
                                tile[...] = upsample_nearest(bitstream.bit_allocation(code), tile.shape)
                            save_image(bit_map_image(bmap), out_dir / f"{label}_{Path(name).stem}_bits.png")
                except Exception as exc:
                    log.error("decode failed for %s with %s (L=%s, s=%s): %s", name, label, L, s, exc)
                    row["error"] = f"decode: {exc}"
                rows.append(row)
    return rows


def load_images(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images in {directory}")
    return {p.name: load_image(p) for p in files}


def write_csv(rows: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean of each metric per (model, L, lambda_s) over successfully coded images."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r.get("error") or "psnr" not in r:
            continue
        groups.setdefault((r["model"], r["lambda_r"], r["L"], r["lambda_s"]), []).append(r)
    out = []
    for (m, lam, L, s), rs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        agg = {"model": m, "lambda_r": lam, "image": "MEAN", "L": L, "lambda_s": s}
        for k in ("bpp", "psnr", "ms_ssim", "mse", "denoise_seconds"):
            agg[k] = float(np.mean([r[k] for r in rs]))
        ds = [r["D"] for r in rs if r.get("D") != ""]
        agg["D"] = float(np.mean(ds)) if ds else ""
        out.append(agg)
    return out


def evaluate(directory, grid: Grid) -> Path:
    """Run the grid over every image in ``directory``; returns the CSV path."""
    images = load_images(directory)
    out_dir = Path(grid.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, ckpt in grid.models.items():
        model, header = load_checkpoint(ckpt)
        lam = float(header["meta"].get("lambda_r", float("nan")))
        rows += evaluate_model(label, model, lam, images, grid, out_dir)
    return write_csv(rows + aggregate(rows), out_dir / "metrics.csv")
