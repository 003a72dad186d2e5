"""Noise schedules and relay weights.

All arrays are float64 regardless of the precision used for latents; the
reverse-step coefficient tests rely on residuals well below 1e-12.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCHEDULE_KINDS = ("linear", "scaled_linear")


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha-bar sequences over steps 1..T.

    Arrays are 0-based in storage: ``betas[t - 1]`` is beta_t.
    """

    T: int
    kind: str
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return float(self.alpha_bars[t - 1])

    def to_dict(self) -> dict:
        return {
            "T": self.T,
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def build_schedule(
    T: int = 1000,
    kind: str = "scaled_linear",
    beta_start: float = 0.00085,
    beta_end: float = 0.012,
) -> NoiseSchedule:
    """Build a linear or scaled-linear (sqrt-interpolated) beta schedule."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    for name, v in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not math.isfinite(v) or not 0.0 < v < 1.0:
            raise ValueError(f"{name} must be finite and in (0, 1), got {v!r}")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")

    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), T, dtype=np.float64) ** 2
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, kind, float(beta_start), float(beta_end), betas, alphas, alpha_bars)


@dataclass(frozen=True)
class RelayWeights:
    """Residual weights eta_1..eta_N with eta_N = 1.

    ``lam`` is the constant that multiplies the residual inside the effective
    noise ``lam * e + eps``.
    """

    N: int
    lam: float
    etas: np.ndarray = field(repr=False)

    def eta(self, n: int) -> float:
        if not 1 <= n <= self.N:
            raise ValueError(f"step {n} outside [1, {self.N}]")
        return float(self.etas[n - 1])


def relay_weights(schedule: NoiseSchedule, N: int = 300) -> RelayWeights:
    if int(N) != N or not 1 <= N <= schedule.T:
        raise ValueError(f"N must be an integer in [1, {schedule.T}], got {N!r}")
    N = int(N)
    ab = schedule.alpha_bars[:N]
    # noise-to-signal ratio sqrt(1 - ab) / sqrt(ab); eta_n is this ratio normalised at n = N
    nsr = np.sqrt(1.0 - ab) / np.sqrt(ab)
    lam = math.sqrt(ab[-1]) / math.sqrt(1.0 - ab[-1])
    etas = lam * nsr
    etas[-1] = 1.0  # exact by construction; pin away the last-ulp rounding
    etas.setflags(write=False)
    return RelayWeights(N, lam, etas)
