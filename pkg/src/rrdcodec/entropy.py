"""Quantisation, vector-quantised side information and the Gaussian rate model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff import SgTape, sg

SIGMA_MIN = 0.11
P_MIN = 2.0 ** -16
_LOG2 = math.log(2.0)


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest integer, ties away from zero (torch.round ties to even)."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(y, mu, mode: str = "eval", tape: SgTape | None = None, name: str = "q"):
    """Mean-centred rounding ``mu + round(y - mu)``.

    In train mode the rounding offset is a stop-gradient constant, so the
    gradient w.r.t. ``y`` is the identity (straight-through).
    """
    if y.shape != mu.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(mu.shape)}")
    r = y - mu
    if mode == "eval":
        return mu + round_half_away(r)
    if mode == "train":
        return mu + r + sg(round_half_away(r) - r, name, tape)
    raise ValueError(f"unknown quantisation mode {mode!r}")


def symbols_of(y, mu) -> torch.Tensor:
    return round_half_away(y - mu).to(torch.int64)


@dataclass
class EntropyParams:
    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma shapes differ")


def likelihood(y_hat, params: EntropyParams) -> torch.Tensor:
    """Discretised Gaussian mass of each element, floored at P_MIN."""
    if not (torch.isfinite(params.mu).all() and torch.isfinite(params.sigma).all()):
        raise ValueError("non-finite entropy parameters")
    sigma = params.sigma.clamp_min(SIGMA_MIN)
    d = y_hat - params.mu
    upper = torch.special.ndtr((d + 0.5) / sigma)
    lower = torch.special.ndtr((d - 0.5) / sigma)
    # evaluate in the lower tail where the difference is better conditioned
    flip = d > 0
    upper2 = torch.special.ndtr((-d + 0.5) / sigma)
    lower2 = torch.special.ndtr((-d - 0.5) / sigma)
    mass = torch.where(flip, upper2 - lower2, upper - lower)
    return mass.clamp_min(P_MIN)


def element_bits(y_hat, params: EntropyParams) -> torch.Tensor:
    return -torch.log(likelihood(y_hat, params)) / _LOG2


def rate_estimate(y_hat, params: EntropyParams) -> torch.Tensor:
    """Total estimated bits for ``y_hat`` under (mu, sigma)."""
    return element_bits(y_hat, params).sum()


def vq_nearest(l_p: torch.Tensor, entries: torch.Tensor):
    """Nearest codebook entry per row of ``l_p`` (n, d); ties go to the lowest index."""
    if entries.shape[0] == 0:
        raise ValueError("empty codebook")
    if l_p.shape[-1] != entries.shape[-1]:
        raise ValueError("vector dimension does not match the codebook")
    # explicit differences keep exact ties exact (the expanded form does not)
    d2 = ((l_p[:, None, :] - entries[None, :, :]) ** 2).sum(-1)
    idx = torch.argmin(d2, dim=1)
    return idx, entries[idx]


def codebook_loss(l_p, l_hat, beta: float = 0.25, tape: SgTape | None = None):
    """``|sg(l_p) - l_hat|^2 + beta |sg(l_hat) - l_p|^2`` (mean squared error form)."""
    if l_p.shape != l_hat.shape:
        raise ValueError("shape mismatch")
    codebook_term = F.mse_loss(l_hat, sg(l_p, "cb_lp", tape), reduction="mean")
    commit_term = beta * F.mse_loss(l_p, sg(l_hat, "cb_lhat", tape), reduction="mean")
    return codebook_term, commit_term


def straight_through(l_p, l_hat, tape: SgTape | None = None):
    """Forward value ``l_hat``; gradient passes to ``l_p`` unchanged."""
    return l_p + sg(l_hat - l_p, "vq_st", tape)


def to_vectors(x: torch.Tensor) -> torch.Tensor:
    """(B, d, h, w) -> (B*h*w, d)."""
    return x.permute(0, 2, 3, 1).reshape(-1, x.shape[1])


def from_vectors(v: torch.Tensor, shape) -> torch.Tensor:
    B, d, h, w = shape
    return v.reshape(B, h, w, d).permute(0, 3, 1, 2)


class Codebook(nn.Module):
    def __init__(self, size: int = 512, dim: int = 8):
        super().__init__()
        if size < 2:
            raise ValueError("codebook needs at least two entries")
        self.entries = nn.Parameter(torch.randn(size, dim) * 0.5)
        self.register_buffer("usage", torch.zeros(size, dtype=torch.int64))

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def index_bits(self) -> int:
        return math.ceil(math.log2(self.size))

    def lookup(self, l_p: torch.Tensor, tape: SgTape | None = None):
        """Quantise a (B, d, h, w) map; returns (indices (B*h*w,), l_hat map)."""
        vecs = to_vectors(l_p)
        with torch.no_grad():
            idx, _ = vq_nearest(vecs, self.entries)
        if tape is not None:
            idx = tape.sg("vq_idx", idx)
        if self.training and tape is None:
            self.usage += torch.bincount(idx, minlength=self.size)
        return idx, from_vectors(self.entries[idx], l_p.shape)

    def gather(self, idx: torch.Tensor, shape) -> torch.Tensor:
        return from_vectors(self.entries[idx], shape)

    @torch.no_grad()
    def reseed_dead(self, vectors: torch.Tensor, generator: torch.Generator | None = None) -> int:
        """Replace entries never used since the last reset with random batch vectors."""
        dead = torch.nonzero(self.usage == 0).flatten()
        if len(dead) and len(vectors):
            pick = torch.randint(len(vectors), (len(dead),), generator=generator)
            self.entries[dead] = vectors[pick].to(self.entries.dtype)
        self.usage.zero_()
        return len(dead)


def anchor_mask(h: int, w: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """1 on checkerboard anchors ((i + j) even), decoded first."""
    i = torch.arange(h, device=device)[:, None]
    j = torch.arange(w, device=device)[None, :]
    return ((i + j) % 2 == 0).to(dtype)[None, None]


class CheckerboardContext(nn.Module):
    """Two-pass spatial context: anchors see only the hyperprior, the rest also
    see the decoded anchors through a 5x5 convolution."""

    def __init__(self, y_channels: int, hyper_channels: int, width: int | None = None):
        super().__init__()
        width = width or 2 * y_channels
        self.ctx = nn.Conv2d(y_channels, width, 5, padding=2)
        self.net = nn.Sequential(
            nn.Conv2d(hyper_channels + width, 2 * width, 1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * width, 1),
            nn.SiLU(),
            nn.Conv2d(2 * width, 2 * y_channels, 1),
        )

    def predict_params(self, y_anchor: torch.Tensor, hyper: torch.Tensor) -> EntropyParams:
        """Entropy parameters given anchors decoded so far.

        Non-anchor inputs of ``y_anchor`` are masked out, and the context
        features are zeroed on anchors, so anchor parameters never depend on
        any symbol and non-anchor parameters only on anchors.
        """
        h, w = y_anchor.shape[-2:]
        a = anchor_mask(h, w, y_anchor.device, y_anchor.dtype)
        ctx = self.ctx(y_anchor * a) * (1 - a)
        mu, raw = self.net(torch.cat([hyper, ctx], dim=1)).chunk(2, dim=1)
        return EntropyParams(mu, F.softplus(raw).clamp_min(SIGMA_MIN))
