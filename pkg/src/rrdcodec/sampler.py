"""Relay residual diffusion: forward process, reverse steps and the sampling loop.

Every function here is pure arithmetic on tensors; scalar coefficients are
computed in float64 from the schedule and cast on use, so the same code runs
on float32 and float64 tensors (or numpy arrays).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch

from .schedule import NoiseSchedule, RelayWeights


class Denoisers(Protocol):
    def cond(self, z: torch.Tensor, c: torch.Tensor, n: int) -> torch.Tensor: ...

    def base(self, z: torch.Tensor, n: int) -> torch.Tensor: ...


@dataclass(frozen=True)
class SamplerCoefficients:
    n_from: int
    n_to: int
    k: float
    m: float
    sigma: float = 0.0


@dataclass(frozen=True)
class StepPlan:
    steps: tuple[int, ...]

    def __post_init__(self):
        s = self.steps
        if not s or s[-1] < 1 or any(a <= b for a, b in zip(s, s[1:])):
            raise ValueError(f"invalid step plan {s}")

    @property
    def L(self) -> int:
        return len(self.steps)

    @property
    def horizon(self) -> int:
        return self.steps[0]


def _check_shapes(*xs):
    shape = tuple(xs[0].shape)
    for x in xs[1:]:
        if tuple(x.shape) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {tuple(x.shape)}")


def _per_sample(values: np.ndarray, n, like):
    """Look up ``values[n - 1]``; a tensor ``n`` gives one value per batch item."""
    if isinstance(n, torch.Tensor) and n.ndim > 0:
        v = torch.tensor(values, dtype=torch.float64)[n.long() - 1]
        return v.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return float(values[int(n) - 1])


def _check_step(n, upper: int):
    lo, hi = (int(n.min()), int(n.max())) if isinstance(n, torch.Tensor) else (int(n), int(n))
    if lo < 1 or hi > upper:
        raise ValueError(f"step outside [1, {upper}]")


def make_start(z_c, schedule: NoiseSchedule, N: int, noise):
    """Noised compressed latent z_N = sqrt(ab_N) z_c + sqrt(1 - ab_N) noise."""
    _check_shapes(z_c, noise)
    ab = schedule.alpha_bar(N)
    return math.sqrt(ab) * z_c + math.sqrt(1.0 - ab) * noise


def forward_diffuse(z_0, z_c, n, schedule: NoiseSchedule, weights: RelayWeights, noise):
    """z_n = sqrt(ab_n) (z_0 + eta_n e) + sqrt(1 - ab_n) noise, with e = z_c - z_0."""
    _check_shapes(z_0, z_c, noise)
    _check_step(n, weights.N)
    ab = _per_sample(schedule.alpha_bars, n, z_0)
    eta = _per_sample(weights.etas, n, z_0)
    e = z_c - z_0
    sqrt = torch.sqrt if isinstance(ab, torch.Tensor) else math.sqrt
    return sqrt(ab) * (z_0 + eta * e) + sqrt(1.0 - ab) * noise


def effective_noise(e, noise, weights: RelayWeights):
    """Regression target of the denoiser: lam * e + noise."""
    _check_shapes(e, noise)
    return weights.lam * e + noise


def predict_z0(z_n, eps_hat, n, schedule: NoiseSchedule, upper: int | None = None):
    _check_shapes(z_n, eps_hat)
    _check_step(n, schedule.T if upper is None else upper)
    ab = _per_sample(schedule.alpha_bars, n, z_n)
    sqrt = torch.sqrt if isinstance(ab, torch.Tensor) else math.sqrt
    return (z_n - sqrt(1.0 - ab) * eps_hat) / sqrt(ab)


def reverse_coefficients(
    n_from: int,
    n_to: int,
    schedule: NoiseSchedule,
    weights: RelayWeights | None = None,
    sigma: float = 0.0,
) -> SamplerCoefficients:
    """Solve the (k, m, sigma) system for a jump n_from -> n_to.

    With sigma = 0 the three matching conditions (mean on z_0, mean on the
    residual, variance) are all satisfied; m is fixed by the variance line and
    the residual line then holds because eta_n is proportional to the
    noise-to-signal ratio. A positive sigma keeps the z_0 and variance lines
    but no longer transports the residual exactly.
    """
    if not 1 <= n_to < n_from:
        raise ValueError(f"need 1 <= n_to < n_from, got n_from={n_from}, n_to={n_to}")
    upper = weights.N if weights is not None else schedule.T
    if n_from > upper:
        raise ValueError(f"n_from={n_from} exceeds horizon {upper}")
    ab_from = schedule.alpha_bar(n_from)
    ab_to = schedule.alpha_bar(n_to)
    var_left = (1.0 - ab_to) - sigma * sigma
    if var_left < 0:
        raise ValueError(f"sigma={sigma} exceeds the target noise level")
    m = math.sqrt(var_left) / math.sqrt(1.0 - ab_from)
    k = math.sqrt(ab_to) - m * math.sqrt(ab_from)
    return SamplerCoefficients(n_from, n_to, k, m, float(sigma))


def reverse_step(z_n, z0_hat, coeffs: SamplerCoefficients, noise=None):
    _check_shapes(z_n, z0_hat)
    out = coeffs.k * z0_hat + coeffs.m * z_n
    if coeffs.sigma > 0:
        if noise is None:
            raise ValueError("sigma > 0 requires a noise tensor")
        out = out + coeffs.sigma * noise
    return out


def spaced_steps(N: int, L: int) -> StepPlan:
    """L evenly spaced steps N, N - N/L, ..., N/L (rounded half up)."""
    if not 1 <= L <= N:
        raise ValueError(f"need 1 <= L <= N, got L={L}, N={N}")
    return StepPlan(tuple((2 * N * (L - i) + L) // (2 * L) for i in range(L)))


def cfg_blend(eps_base, eps_cond, lambda_s: float):
    """Guidance blend base + s (cond - base), written so s=0 and s=1 are exact."""
    _check_shapes(eps_base, eps_cond)
    if not math.isfinite(lambda_s):
        raise ValueError("lambda_s must be finite")
    return (1.0 - lambda_s) * eps_base + lambda_s * eps_cond


def seeded_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    """Standard normal tensor from a PCG64 stream (stable across platforms)."""
    rng = np.random.Generator(np.random.PCG64(int(seed) & ((1 << 64) - 1)))
    return torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype)


def guided_eps(denoisers: Denoisers, z, c, n: int, lambda_s: float):
    # skip an evaluator whose blend weight is exactly zero
    if lambda_s == 1.0:
        return denoisers.cond(z, c, n)
    if lambda_s == 0.0:
        return denoisers.base(z, n)
    return cfg_blend(denoisers.base(z, n), denoisers.cond(z, c, n), lambda_s)


def reconstruct(
    z_c,
    c,
    plan: StepPlan,
    lambda_s: float,
    seed: int | None,
    denoisers: Denoisers,
    schedule: NoiseSchedule,
    *,
    start: str = "relay",
    noise=None,
    return_trajectory: bool = False,
):
    """Run the L-step deterministic reverse loop and return z0_hat.

    ``start="relay"`` begins at the noised compressed latent; ``"noise"`` is the
    pure-noise baseline (z_c is then used only for its shape). ``noise``
    overrides the seeded start noise, which keeps the loop differentiable
    w.r.t. a caller-provided sample during training.
    """
    if plan.horizon > schedule.T:
        raise ValueError(f"plan horizon {plan.horizon} exceeds schedule T={schedule.T}")
    if noise is None:
        if seed is None:
            raise ValueError("either seed or noise is required")
        noise = seeded_noise(z_c.shape, seed, z_c.dtype).to(z_c.device)
    if start == "relay":
        z = make_start(z_c, schedule, plan.horizon, noise)
    elif start == "noise":
        _check_shapes(z_c, noise)
        z = noise
    else:
        raise ValueError(f"unknown start mode {start!r}")

    trajectory = [z]
    steps = plan.steps
    z0_hat = None
    for i, n in enumerate(steps):
        eps = guided_eps(denoisers, z, c, n, lambda_s)
        z0_hat = predict_z0(z, eps, n, schedule)
        if i + 1 < len(steps):
            z = reverse_step(z, z0_hat, reverse_coefficients(n, steps[i + 1], schedule))
            trajectory.append(z)
    if return_trajectory:
        return z0_hat, trajectory
    return z0_hat
