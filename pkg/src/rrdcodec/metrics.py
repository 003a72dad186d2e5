"""PSNR and multi-scale SSIM on float images in [0, 1], shape (C, H, W)."""
from __future__ import annotations

import logging
import math

import numpy as np
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def psnr(x, y, data_range: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range**2 / mse))


def _gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable filtering over the last two axes, keeping only fully covered pixels
    h = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=-1, mode="constant"), g, axis=-2, mode="constant")
    return out[..., h:-h, h:-h]


def _ssim_terms(x, y, data_range):
    """Mean luminance and contrast-structure terms over the valid region."""
    g = _gaussian_window()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(np.mean(lum)), float(np.mean(cs))


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    img = img[..., :h, :w]
    return 0.25 * (img[..., 0::2, 0::2] + img[..., 1::2, 0::2] + img[..., 0::2, 1::2] + img[..., 1::2, 1::2])


def usable_scales(h: int, w: int, scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Number of scales whose smallest image still fits the window."""
    n = 0
    while n < scales and min(h, w) >= WINDOW:
        n += 1
        h, w = h // 2, w // 2
    return n


def ms_ssim(x, y, data_range: float = 1.0, weights=MS_SSIM_WEIGHTS) -> float:
    """Multi-scale SSIM with the standard five-scale weights.

    Images too small for all five scales use as many as fit, with the
    remaining weights renormalised (a warning is logged). Negative per-scale
    terms are clamped at zero so the product stays in [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    n = usable_scales(*x.shape[-2:], len(weights))
    if n == 0:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {WINDOW}x{WINDOW} window")
    w = np.asarray(weights[:n], dtype=np.float64)
    if n < len(weights):
        log.warning("ms_ssim: %s too small for %d scales, using %d", x.shape[-2:], len(weights), n)
        w = w / w.sum()
    value = 1.0
    for i in range(n):
        lum, cs = _ssim_terms(x, y, data_range)
        term = lum * cs if i == n - 1 else cs
        value *= max(term, 0.0) ** w[i]
        x, y = _downsample(x), _downsample(y)
    return float(min(max(value, 0.0), 1.0))
