"""Small differentiable maps: autoencoder, codec transforms, denoisers.

Everything is fully convolutional. Stride-2 convolutions give ceil(n/2)
outputs and every upsampling path crops to an explicit target size, so any
image whose sides are multiples of the autoencoder factor (8) is accepted.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import entropy
from .autodiff import SgTape
from .entropy import CheckerboardContext, Codebook, EntropyParams, anchor_mask
from .sampler import StepPlan, reconstruct, spaced_steps
from .schedule import build_schedule, relay_weights

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    image_channels: int = 3
    latent_channels: int = 4
    ae_width: int = 32
    ae_levels: int = 3  # downsampling factor 2**ae_levels
    codec_width: int = 48
    y_channels: int = 16
    side_channels: int = 8
    cond_channels: int = 32
    codebook_size: int = 512
    denoiser_width: int = 64
    denoiser_blocks: int = 4
    control_ratio: float = 0.2
    temb_dim: int = 64
    T: int = 1000
    schedule: str = "scaled_linear"
    beta_start: float = 0.00085
    beta_end: float = 0.012
    N: int = 300
    start: str = "relay"  # or "noise" for the pure-noise baseline

    @property
    def factor(self) -> int:
        return 2 ** self.ae_levels

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def upsample_to(x: torch.Tensor, size) -> torch.Tensor:
    x = F.interpolate(x, scale_factor=2, mode="nearest")
    return x[..., : size[0], : size[1]]


def _check_image(x: torch.Tensor, factor: int):
    if x.ndim != 4:
        raise ValueError("expected a (B, C, H, W) tensor")
    if x.shape[-1] % factor or x.shape[-2] % factor:
        raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {factor}")
    if not torch.isfinite(x).all():
        raise ValueError("non-finite input")


class Encoder(nn.Module):
    # the first 2x reduction is a pixel unshuffle, so no convolution runs at full resolution
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.ae_width
        layers = [nn.PixelUnshuffle(2), conv(4 * cfg.image_channels, w), nn.SiLU(), conv(w, w), nn.SiLU()]
        for _ in range(cfg.ae_levels - 1):
            layers += [conv(w, w, stride=2), nn.SiLU(), conv(w, w), nn.SiLU()]
        layers.append(conv(w, cfg.latent_channels))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.ae_width
        self.inp = nn.Sequential(conv(cfg.latent_channels, w), nn.SiLU(), conv(w, w), nn.SiLU())
        self.ups = nn.ModuleList(
            nn.Sequential(conv(w, w), nn.SiLU(), conv(w, w), nn.SiLU()) for _ in range(cfg.ae_levels - 1)
        )
        self.out = nn.Sequential(conv(w, 4 * cfg.image_channels), nn.PixelShuffle(2))

    def forward(self, z):
        h = self.inp(z)
        for up in self.ups:
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(h)


class Autoencoder(nn.Module):
    """Image <-> latent maps with a fixed latent scale (set after pretraining)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.factor = cfg.factor
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.register_buffer("latent_scale", torch.tensor(1.0))

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        _check_image(x, self.factor)
        return self.encoder(x) * self.latent_scale

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z / self.latent_scale).clamp(0.0, 1.0)


def timestep_embedding(n, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    n = torch.as_tensor(n, dtype=torch.float32).reshape(-1)
    if not torch.isfinite(n).all() or (n < 0).any():
        raise ValueError("time steps must be finite and non-negative")
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = n.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1).float()


class TimeMLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, n, batch: int, dtype):
        e = timestep_embedding(n, self.dim).to(dtype)
        if e.shape[0] == 1:
            e = e.expand(batch, -1)
        return self.net(e)


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb_dim: int):
        super().__init__()
        self.conv1 = conv(ch, ch)
        self.emb = nn.Linear(emb_dim, ch)
        self.conv2 = conv(ch, ch)

    def forward(self, x, emb):
        h = self.conv1(F.silu(x)) + self.emb(F.silu(emb))[:, :, None, None]
        return x + self.conv2(F.silu(h))


class BaseDenoiser(nn.Module):
    """Unconditional noise estimator; control residuals are added after each block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.denoiser_width
        self.temb = TimeMLP(cfg.temb_dim)
        self.inp = conv(cfg.latent_channels, w)
        self.blocks = nn.ModuleList(ResBlock(w, cfg.temb_dim) for _ in range(cfg.denoiser_blocks))
        self.out = conv(w, cfg.latent_channels)

    def forward(self, z, n, residuals=None):
        emb = self.temb(n, z.shape[0], z.dtype)
        h = self.inp(z)
        for i, blk in enumerate(self.blocks):
            h = blk(h, emb)
            if residuals is not None:
                h = h + residuals[i]
        return self.out(F.silu(h))


class ControlModule(nn.Module):
    """Reduced-width copy of the denoiser trunk fed with the condition ``c``.

    Its per-block outputs pass through zero-initialised 1x1 convolutions, so a
    fresh module leaves the base estimate untouched.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = max(4, round(cfg.control_ratio * cfg.denoiser_width))
        self.width = w
        self.temb = TimeMLP(cfg.temb_dim)
        self.inp = conv(cfg.latent_channels, w)
        self.cond = nn.Sequential(conv(cfg.cond_channels, w), nn.SiLU(), conv(w, w))
        self.blocks = nn.ModuleList(ResBlock(w, cfg.temb_dim) for _ in range(cfg.denoiser_blocks))
        self.zero = nn.ModuleList(nn.Conv2d(w, cfg.denoiser_width, 1) for _ in range(cfg.denoiser_blocks))
        for zc in self.zero:
            nn.init.zeros_(zc.weight)
            nn.init.zeros_(zc.bias)

    def forward(self, z, c, n):
        if z.shape[-2:] != c.shape[-2:] or z.shape[0] != c.shape[0]:
            raise ValueError("latent and condition shapes disagree")
        emb = self.temb(n, z.shape[0], z.dtype)
        h = self.inp(z) + self.cond(c)
        out = []
        for blk, zc in zip(self.blocks, self.zero):
            h = blk(h, emb)
            out.append(zc(h))
        return out


class Codec(nn.Module):
    """Analysis/synthesis transforms with a VQ hyperprior and checkerboard context."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w, M, d = cfg.codec_width, cfg.y_channels, cfg.side_channels
        self.g_a = nn.Sequential(
            conv(cfg.latent_channels, w), nn.SiLU(), conv(w, w, stride=2), nn.SiLU(), conv(w, M)
        )
        self.g_s_in = nn.Sequential(conv(M, w), nn.SiLU())
        self.g_s_trunk = nn.Sequential(conv(w, w), nn.SiLU(), conv(w, w), nn.SiLU())
        self.head_c = conv(w, cfg.cond_channels)
        self.head_z = conv(w, cfg.latent_channels)
        self.h_a = nn.Sequential(conv(M, w), nn.SiLU(), conv(w, d, stride=2))
        self.h_s_in = nn.Sequential(conv(d, w), nn.SiLU())
        self.h_s_out = conv(w, 2 * M)
        self.context = CheckerboardContext(M, 2 * M)
        self.codebook = Codebook(cfg.codebook_size, d)

    def analysis(self, z0):
        return self.g_a(z0)

    def synthesis(self, y_hat, size):
        h = upsample_to(self.g_s_in(y_hat), size)
        h = self.g_s_trunk(h)
        return self.head_c(h), self.head_z(h)

    def hyper(self, l_hat, size):
        return self.h_s_out(upsample_to(self.h_s_in(l_hat), size))

    def entropy_params(self, y_anchor, hyper) -> EntropyParams:
        return self.context.predict_params(y_anchor, hyper)

    def forward(self, z0, mode: str = "train", u=None, tape: SgTape | None = None) -> dict:
        """Full latent-codec pass.

        Train mode: decoder branch uses straight-through rounding, the rate is
        measured on ``y + u``. Eval mode: hard rounding for both.
        """
        y = self.analysis(z0)
        l_p = self.h_a(y)
        idx, l_hat = self.codebook.lookup(l_p, tape)
        hyper = self.hyper(entropy.straight_through(l_p, l_hat, tape), y.shape[-2:])

        a = anchor_mask(*y.shape[-2:], device=y.device, dtype=y.dtype)
        p1 = self.entropy_params(torch.zeros_like(y), hyper)
        y_anchor = entropy.quantize(y, p1.mu, mode, tape, "q_anchor") * a
        p2 = self.entropy_params(y_anchor, hyper)
        mu = torch.where(a.bool(), p1.mu, p2.mu)
        sigma = torch.where(a.bool(), p1.sigma, p2.sigma)
        y_hat = y_anchor + entropy.quantize(y, mu, mode, tape, "q_rest") * (1 - a)
        params = EntropyParams(mu, sigma)

        if mode == "train":
            if u is None:
                u = torch.rand_like(y) - 0.5
            y_rate = y + u
        else:
            y_rate = y_hat
        bits = entropy.element_bits(y_rate, params)
        c, z_c = self.synthesis(y_hat, z0.shape[-2:])
        cb, commit = entropy.codebook_loss(l_p, l_hat, beta=1.0, tape=tape)
        return {
            "y": y, "y_hat": y_hat, "params": params, "bits": bits,
            "l_p": l_p, "l_hat": l_hat, "indices": idx,
            "c": c, "z_c": z_c, "cb_loss": cb, "commit_loss": commit,
        }


class RandomFeatureLoss(nn.Module):
    """Perceptual proxy: MSE between features of a frozen random conv stack."""

    def __init__(self, channels: int = 3, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        widths = [channels, 16, 32, 32]
        self.convs = nn.ModuleList()
        for i, (a, b) in enumerate(zip(widths, widths[1:])):
            layer = conv(a, b, stride=1 if i == 0 else 2)
            with torch.no_grad():
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=g) * math.sqrt(2.0 / (a * 9)))
                layer.bias.zero_()
            layer.requires_grad_(False)
            self.convs.append(layer)

    def forward(self, x, y):
        loss = x.new_zeros(())
        hx, hy = x, y
        for layer in self.convs:
            hx, hy = F.silu(layer(hx)), F.silu(layer(hy))
            loss = loss + F.mse_loss(hx, hy)
        return loss / len(self.convs)


class DenoiserPair:
    """Conditional and base evaluators in the form the sampler expects."""

    def __init__(self, model: "RRDModel"):
        self.model = model

    def cond(self, z, c, n):
        m = self.model
        return m.base(z, n, m.control(z, c, n))

    def base(self, z, n):
        return self.model.base(z, n)


class RRDModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        if cfg.start not in ("relay", "noise"):
            raise ValueError(f"unknown start mode {cfg.start!r}")
        self.ae = Autoencoder(cfg)
        self.base = BaseDenoiser(cfg)
        self.control = ControlModule(cfg)
        self.codec = Codec(cfg)
        self.perceptual = RandomFeatureLoss(cfg.image_channels)
        self.schedule = build_schedule(cfg.T, cfg.schedule, cfg.beta_start, cfg.beta_end)
        self.weights = relay_weights(self.schedule, cfg.N)

    @property
    def horizon(self) -> int:
        return self.cfg.N if self.cfg.start == "relay" else self.cfg.T

    def denoisers(self) -> DenoiserPair:
        return DenoiserPair(self)

    def plan(self, L: int) -> StepPlan:
        return spaced_steps(self.horizon, L)

    def denoise_cond(self, z, c, n):
        return self.denoisers().cond(z, c, n)

    def denoise_base(self, z, n):
        return self.base(z, n)

    def sample(self, z_c, c, L: int, lambda_s: float = 1.0, seed=None, noise=None, **kw):
        return reconstruct(
            z_c, c, self.plan(L), lambda_s, seed, self.denoisers(), self.schedule,
            start=self.cfg.start, noise=noise, **kw,
        )

    def freeze(self, *names: str):
        for name in names:
            getattr(self, name).requires_grad_(False)

    def model_hash(self) -> bytes:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            if name.endswith("usage"):
                continue
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.digest()[:8]


def save_checkpoint(model: RRDModel, path, meta: dict | None = None) -> Path:
    """Write an ``.npz`` container: one array per parameter plus a JSON header.

    Header keys: ``format_version``, ``topology`` (ModelConfig fields),
    ``model_hash`` (hex), ``config_hash`` and free-form ``meta``.
    """
    path = Path(path)
    meta = dict(meta or {})
    header = {
        "format_version": CHECKPOINT_VERSION,
        "topology": asdict(model.cfg),
        "model_hash": model.model_hash().hex(),
        "config_hash": meta.pop("config_hash", ""),
        "meta": meta,
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def load_checkpoint(path) -> tuple[RRDModel, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__header__" not in data:
            raise ValueError(f"{path} is not a model checkpoint")
        header = json.loads(data["__header__"].tobytes().decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        model = RRDModel(ModelConfig.from_dict(header["topology"]))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise ValueError(f"checkpoint incompatible: missing={missing} unexpected={unexpected}")
    if header["model_hash"] != model.model_hash().hex():
        raise ValueError("checkpoint hash mismatch")
    model.eval()
    return model, header
