"""Two-stage training: per-step noise estimation, then fixed-step fine-tuning.

Squared norms in the losses are mean squared errors over elements; the rate
term is in bits per image pixel, so all terms are per-pixel/per-element
quantities of comparable magnitude.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import SgTape
from .nets import ModelConfig, RRDModel, load_checkpoint, save_checkpoint
from .sampler import effective_noise, forward_diffuse, predict_z0

log = logging.getLogger(__name__)

LAMBDA_R_GRID = (2.0, 1.0, 0.5, 0.25, 0.1)
CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    stage: str = "1"
    lambda_r: float = 1.0
    lambda_perc: float = 0.5
    L: int = 2
    seed: int = 0
    batch_size: int = 16
    # stage I runs a warm-up phase at warmup_lambda_r, then iters at lambda_r
    warmup_lambda_r: float = 2.0
    warmup_iters: int = 600
    iters: int = 600
    lr: float = 1e-3
    lr_target: float = 2e-4
    stage2_iters: int = 300
    stage2_lr: float = 2e-4
    beta_cb: float = 0.25
    clip_norm: float = 1.0
    reseed_every: int = 250
    # pretraining of the frozen autoencoder and base denoiser
    ae_iters: int = 1500
    ae_lr: float = 2e-3
    base_iters: int = 1500
    base_lr: float = 1e-3
    corpus_size: int = 2048
    version: int = CONFIG_VERSION

    def __post_init__(self):
        self.stage = str(self.stage)
        if self.stage not in ("1", "2"):
            raise ValueError(f"stage must be '1' or '2', got {self.stage!r}")
        if not self.lambda_r > 0:
            raise ValueError("lambda_r must be positive")
        if self.L < 1:
            raise ValueError("L must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {d.get('version')}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> tuple[TrainConfig, ModelConfig]:
    """Read a JSON config with optional ``train`` and ``model`` sections."""
    d = json.loads(Path(path).read_text())
    return TrainConfig.from_dict(d.get("train", {})), ModelConfig.from_dict(d.get("model", {}))


def save_config(path, train: TrainConfig, model: ModelConfig) -> Path:
    path = Path(path)
    path.write_text(json.dumps({"train": train.to_dict(), "model": asdict(model)}, indent=2, sort_keys=True))
    return path


@dataclass
class LossReport:
    terms: dict[str, torch.Tensor]
    weights: dict[str, float]
    total: torch.Tensor = field(init=False)

    def __post_init__(self):
        total = 0.0
        for name, value in self.terms.items():
            if not torch.isfinite(value):
                raise FloatingPointError(f"non-finite loss term {name}: {self.values()}")
            total = total + self.weights.get(name, 1.0) * value.double()
        self.total = total

    def values(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        if hasattr(self, "total"):
            out["total"] = float(self.total.detach())
        return out


def omega(schedule, n: torch.Tensor) -> torch.Tensor:
    ab = torch.tensor(schedule.alpha_bars, dtype=torch.float64)[n.long() - 1]
    return (1.0 - ab) / ab


def diffuse_for_training(model: RRDModel, z0, z_c, n, noise):
    """Noisy latent and regression target for the model's start mode."""
    if model.cfg.start == "relay":
        z_n = forward_diffuse(z0, z_c, n, model.schedule, model.weights, noise)
        return z_n, effective_noise(z_c - z0, noise, model.weights)
    # pure-noise baseline: standard forward process, no residual
    ab = torch.tensor(model.schedule.alpha_bars, dtype=torch.float64)[n.long() - 1]
    ab = ab.to(z0.dtype).view(-1, 1, 1, 1)
    return ab.sqrt() * z0 + (1 - ab).sqrt() * noise, noise


def noise_estimation_loss(model: RRDModel, z0, z_c, c, n, noise) -> torch.Tensor:
    """omega_n-weighted epsilon regression; equals the z_0-space error."""
    z_n, target = diffuse_for_training(model, z0, z_c, n, noise)
    eps = model.denoise_cond(z_n, c, n)
    w = omega(model.schedule, n).to(z0.dtype).view(-1, 1, 1, 1)
    return (w * (target - eps) ** 2).mean()


def z0_space_loss(model: RRDModel, z0, z_c, c, n, noise) -> torch.Tensor:
    z_n, _ = diffuse_for_training(model, z0, z_c, n, noise)
    z0_hat = predict_z0(z_n, model.denoise_cond(z_n, c, n), n, model.schedule)
    return ((z0 - z0_hat) ** 2).mean()


def draw_randomness(model: RRDModel, z0, generator: torch.Generator) -> dict:
    B = z0.shape[0]
    y_shape = (B, model.cfg.y_channels, math.ceil(z0.shape[-2] / 2), math.ceil(z0.shape[-1] / 2))
    return {
        "n": torch.randint(1, model.horizon + 1, (B,), generator=generator),
        "noise": torch.randn(z0.shape, generator=generator, dtype=z0.dtype),
        "u": torch.rand(y_shape, generator=generator, dtype=z0.dtype) - 0.5,
    }


def _pixels(model: RRDModel, z0) -> int:
    f = model.cfg.factor
    return z0.shape[0] * z0.shape[-2] * f * z0.shape[-1] * f


def stage1_loss(model: RRDModel, z0, cfg: TrainConfig, draws: dict, tape: SgTape | None = None,
                lambda_r: float | None = None) -> LossReport:
    lam = cfg.lambda_r if lambda_r is None else lambda_r
    out = model.codec(z0, "train", u=draws["u"], tape=tape)
    terms = {
        "codebook": out["cb_loss"],
        "commitment": out["commit_loss"],
        "latent_distortion": F.mse_loss(out["z_c"], z0),
        "rate_bpp": out["bits"].sum() / _pixels(model, z0),
        "noise_estimation": noise_estimation_loss(model, z0, out["z_c"], out["c"], draws["n"], draws["noise"]),
    }
    weights = {"commitment": cfg.beta_cb, "latent_distortion": lam, "noise_estimation": lam}
    return LossReport(terms, weights)


def stage2_loss(model: RRDModel, x, z0, cfg: TrainConfig, draws: dict, tape: SgTape | None = None) -> LossReport:
    lam = cfg.lambda_r
    out = model.codec(z0, "train", u=draws["u"], tape=tape)
    z0_hat = model.sample(out["z_c"], out["c"], cfg.L, 1.0, noise=draws["noise"])
    x_hat = model.ae.decode_latent(z0_hat)
    terms = {
        "pixel": F.mse_loss(x_hat, x),
        "perceptual": model.perceptual(x_hat, x),
        "latent_distortion": F.mse_loss(out["z_c"], z0),
        "rate_bpp": out["bits"].sum() / _pixels(model, z0),
        "codebook": out["cb_loss"],
        "commitment": out["commit_loss"],
        "latent_reconstruction": F.mse_loss(z0_hat, z0),
    }
    weights = {
        "pixel": lam,
        "perceptual": lam * cfg.lambda_perc,
        "latent_distortion": lam,
        "commitment": cfg.beta_cb,
        "latent_reconstruction": lam,
    }
    return LossReport(terms, weights)


class MetricsLog:
    """Line-delimited JSON records, one per iteration."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record):
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record) + "\n")


def _set_seed(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def _step(opt, params, loss, clip_norm):
    opt.zero_grad(set_to_none=True)
    loss.backward()
    norm = torch.nn.utils.clip_grad_norm_(params, clip_norm)
    opt.step()
    return float(norm)


@torch.no_grad()
def encode_corpus(model: RRDModel, images: np.ndarray, batch: int = 256) -> torch.Tensor:
    model.ae.eval()
    out = [model.ae.encode_image(torch.from_numpy(images[i : i + batch])) for i in range(0, len(images), batch)]
    return torch.cat(out)


def pretrain_autoencoder(model: RRDModel, images: np.ndarray, cfg: TrainConfig, metrics: MetricsLog | None = None):
    gen = _set_seed(cfg.seed)
    ae = model.ae
    ae.train()
    params = list(ae.encoder.parameters()) + list(ae.decoder.parameters())
    opt = torch.optim.Adam(params, lr=cfg.ae_lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.ae_iters, 1))
    data = torch.from_numpy(images)
    for it in range(cfg.ae_iters):
        x = data[torch.randint(len(data), (cfg.batch_size,), generator=gen)]
        z = ae.encoder(x)
        x_hat = ae.decoder(z)
        mse = F.mse_loss(x_hat, x)
        loss = mse + 1e-4 * (z**2).mean()
        _step(opt, params, loss, 10.0)
        sched.step()
        if metrics:
            metrics.write(stage="ae", iter=it, mse=mse.item())
    with torch.no_grad():
        z = torch.cat([ae.encoder(data[i : i + 256]) for i in range(0, len(data), 256)])
        ae.latent_scale.fill_(1.0 / float(z.std()))
    ae.eval()
    ae.requires_grad_(False)


def pretrain_base(model: RRDModel, latents: torch.Tensor, cfg: TrainConfig, metrics: MetricsLog | None = None):
    """Standard epsilon-prediction objective over all T steps."""
    gen = _set_seed(cfg.seed + 1)
    base = model.base
    base.train()
    params = list(base.parameters())
    opt = torch.optim.Adam(params, lr=cfg.base_lr, betas=(0.9, 0.999))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.base_iters, 1))
    ab_all = torch.tensor(model.schedule.alpha_bars, dtype=torch.float32)
    for it in range(cfg.base_iters):
        z0 = latents[torch.randint(len(latents), (cfg.batch_size,), generator=gen)]
        t = torch.randint(1, model.cfg.T + 1, (len(z0),), generator=gen)
        eps = torch.randn(z0.shape, generator=gen)
        ab = ab_all[t - 1].view(-1, 1, 1, 1)
        loss = F.mse_loss(base(ab.sqrt() * z0 + (1 - ab).sqrt() * eps, t), eps)
        _step(opt, params, loss, 1.0)
        sched.step()
        if metrics:
            metrics.write(stage="base", iter=it, loss=loss.item())
    base.eval()
    base.requires_grad_(False)


def pretrain_foundation(model_cfg: ModelConfig, images: np.ndarray, cfg: TrainConfig,
                        metrics: MetricsLog | None = None) -> RRDModel:
    """Train and freeze the autoencoder and unconditional denoiser."""
    _set_seed(cfg.seed)
    model = RRDModel(model_cfg)
    pretrain_autoencoder(model, images, cfg, metrics)
    pretrain_base(model, encode_corpus(model, images), cfg, metrics)
    return model


def _trainable(model: RRDModel):
    model.freeze("ae", "base", "perceptual")
    model.codec.requires_grad_(True)
    model.control.requires_grad_(True)
    return list(model.codec.parameters()) + list(model.control.parameters())


def train_stage1(model: RRDModel, latents: torch.Tensor, cfg: TrainConfig,
                 metrics: MetricsLog | None = None, skip_warmup: bool = False) -> RRDModel:
    gen = _set_seed(cfg.seed + 2)
    params = _trainable(model)
    model.codec.train()
    model.control.train()
    phases = [] if skip_warmup else [(cfg.warmup_lambda_r, cfg.lr, cfg.warmup_iters, "1-warmup")]
    phases.append((cfg.lambda_r, cfg.lr_target, cfg.iters, "1"))
    for lam, lr, iters, name in phases:
        opt = torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))
        for it in range(iters):
            z0 = latents[torch.randint(len(latents), (cfg.batch_size,), generator=gen)]
            rep = stage1_loss(model, z0, cfg, draw_randomness(model, z0, gen), lambda_r=lam)
            norm = _step(opt, params, rep.total, cfg.clip_norm)
            if cfg.reseed_every and (it + 1) % cfg.reseed_every == 0:
                with torch.no_grad():
                    vecs = model.codec.h_a(model.codec.analysis(z0))
                model.codec.codebook.reseed_dead(vecs.permute(0, 2, 3, 1).reshape(-1, vecs.shape[1]), gen)
            if metrics:
                metrics.write(stage=name, iter=it, lambda_r=lam, grad_norm=norm, **rep.values())
    model.eval()
    return model


def train_stage2(model: RRDModel, images: np.ndarray, latents: torch.Tensor, cfg: TrainConfig,
                 metrics: MetricsLog | None = None) -> RRDModel:
    gen = _set_seed(cfg.seed + 3)
    params = _trainable(model)
    model.codec.train()
    model.control.train()
    opt = torch.optim.Adam(params, lr=cfg.stage2_lr, betas=(0.9, 0.999))
    data = torch.from_numpy(images)
    for it in range(cfg.stage2_iters):
        idx = torch.randint(len(data), (cfg.batch_size,), generator=gen)
        x, z0 = data[idx], latents[idx]
        rep = stage2_loss(model, x, z0, cfg, draw_randomness(model, z0, gen))
        norm = _step(opt, params, rep.total, cfg.clip_norm)
        if metrics:
            metrics.write(stage="2", iter=it, grad_norm=norm, **rep.values())
    model.eval()
    return model


def train(cfg: TrainConfig, images: np.ndarray, init=None, out=None, metrics_path=None,
          model_cfg: ModelConfig | None = None) -> RRDModel:
    """Run one training stage and optionally write a checkpoint.

    Stage 1 starts from ``init`` (a checkpoint holding a pretrained autoencoder
    and base denoiser) or pretrains them first when ``init`` is None. Stage 2
    requires a stage-1 checkpoint.
    """
    if len(images) == 0:
        raise ValueError("empty corpus")
    if cfg.stage == "2":
        if init is None:
            raise ValueError("stage 2 requires a stage 1 checkpoint")
        model, header = load_checkpoint(init)
        if header["meta"].get("stage") not in ("1", "2"):
            raise ValueError("stage 2 requires a stage 1 checkpoint")
    elif init is not None:
        model, _ = load_checkpoint(init)
        if model_cfg is not None and model_cfg.start != model.cfg.start:
            model.cfg.start = model_cfg.start
    metrics = MetricsLog(metrics_path)
    if cfg.stage == "1" and init is None:
        model = pretrain_foundation(model_cfg or ModelConfig(), images, cfg, metrics)

    latents = encode_corpus(model, images)
    if cfg.stage == "1":
        train_stage1(model, latents, cfg, metrics)
    else:
        train_stage2(model, images, latents, cfg, metrics)
    if out is not None:
        save_checkpoint(model, out, {"stage": cfg.stage, "config_hash": cfg.hash(),
                                     "lambda_r": cfg.lambda_r, "L": cfg.L})
    return model


@torch.no_grad()
def evaluate_heldout(model: RRDModel, images: np.ndarray, L: int, lambda_s: float = 1.0,
                     seed: int = 0, batch: int = 64) -> dict:
    """Pixel MSE and estimated bpp with hard quantisation (no bitstream)."""
    model.eval()
    se, bits, n_pix = 0.0, 0.0, 0
    for i in range(0, len(images), batch):
        x = torch.from_numpy(images[i : i + batch])
        z0 = model.ae.encode_image(x)
        out = model.codec(z0, "eval")
        z0_hat = model.sample(out["z_c"], out["c"], L, lambda_s, seed=seed + i)
        x_hat = model.ae.decode_latent(z0_hat)
        se += float(((x_hat - x) ** 2).sum())
        bits += float(out["bits"].sum())
        n_pix += x.shape[0] * x.shape[-1] * x.shape[-2]
    return {"mse": se / (n_pix * 3), "bpp_estimate": bits / n_pix}
