"""Toy image corpus: random crops of the photographs bundled with scikit-image."""
from __future__ import annotations

from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

TRAIN_SOURCES = (
    "astronaut", "chelsea", "rocket", "hubble_deep_field", "retina",
    "immunohistochemistry", "brick", "gravel", "camera", "coins", "moon",
)
HELDOUT_SOURCES = ("coffee", "grass", "cat")


@lru_cache(maxsize=None)
def _source(name: str) -> np.ndarray:
    import skimage.data

    img = getattr(skimage.data, name)()
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.ascontiguousarray(img[..., :3])


@lru_cache(maxsize=None)
def _pyramid(name: str, scales=(1, 2, 3, 4)) -> tuple[np.ndarray, ...]:
    img = Image.fromarray(_source(name))
    out = []
    for s in scales:
        w, h = img.size[0] // s, img.size[1] // s
        out.append(np.asarray(img.resize((w, h), Image.BOX)))
    return tuple(out)


def toy_corpus(n: int, seed: int = 0, split: str = "train", size: int = 64) -> np.ndarray:
    """``n`` random ``size`` x ``size`` crops as float32 (n, 3, size, size) in [0, 1].

    Crops are drawn at random down-scaling factors with random flips; the
    held-out split uses photographs that never appear in training.
    """
    sources = {"train": TRAIN_SOURCES, "heldout": HELDOUT_SOURCES}[split]
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3, size, size), dtype=np.float32)
    for k in range(n):
        levels = [lv for lv in _pyramid(sources[rng.integers(len(sources))]) if min(lv.shape[:2]) >= size]
        img = levels[rng.integers(len(levels))]
        i = rng.integers(img.shape[0] - size + 1)
        j = rng.integers(img.shape[1] - size + 1)
        crop = img[i : i + size, j : j + size]
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[k] = crop.transpose(2, 0, 1) / 255.0
    return out


def load_image(path) -> np.ndarray:
    """8-bit RGB image file -> float32 (3, H, W) in [0, 1]."""
    with Image.open(Path(path)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def to_uint8(x) -> np.ndarray:
    """(3, H, W) floats -> (H, W, 3) uint8, clamped then rounded half away from zero."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(x + 0.5).astype(np.uint8).transpose(1, 2, 0)


def save_image(x, path) -> Path:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() in (".ppm", ".pnm") else "PNG"
    Image.fromarray(to_uint8(x)).save(path, format=fmt)
    return path
