"""Stop-gradient bookkeeping and a central-difference gradient checker."""
from __future__ import annotations

import math
from typing import Callable, Iterable

import torch


class SgTape:
    """Records stop-gradient values so a loss can be replayed with them frozen.

    Autograd treats ``sg(x)`` as a constant. A finite-difference probe only
    agrees with that if the constant really stays put while parameters are
    perturbed, so the tape stores every ``sg`` value (and any discrete choice
    such as rounding offsets or codebook indices) on the first evaluation and
    hands back the stored copies afterwards.
    """

    def __init__(self):
        self._values: dict[str, torch.Tensor] = {}
        self.replay = False

    def sg(self, name: str, x: torch.Tensor) -> torch.Tensor:
        if self.replay:
            return self._values[name]
        if name in self._values:
            raise KeyError(f"duplicate stop-gradient key {name!r}")
        v = x.detach().clone()
        self._values[name] = v
        return v

    def reset(self):
        self._values.clear()
        self.replay = False


def sg(x: torch.Tensor, name: str, tape: SgTape | None = None) -> torch.Tensor:
    return x.detach() if tape is None else tape.sg(name, x)


def grad_check(
    loss_fn: Callable[[SgTape], torch.Tensor],
    params: Iterable[torch.nn.Parameter],
    epsilon: float = 1e-6,
    samples_per_param: int = 4,
    generator: torch.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` receives a tape; it must route every stop-gradient and discrete
    decision through it. Parameters should be float64 for the check.
    """
    params = [p for p in params if p.requires_grad]
    tape = SgTape()
    for p in params:
        p.grad = None
    loss = loss_fn(tape)
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite loss in grad_check")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    tape.replay = True

    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            k = min(samples_per_param, flat.numel())
            idx = torch.randperm(flat.numel(), generator=generator)[:k]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + epsilon
                f_plus = loss_fn(tape).item()
                flat[i] = orig - epsilon
                f_minus = loss_fn(tape).item()
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise FloatingPointError("non-finite loss in grad_check")
                numeric = (f_plus - f_minus) / (2 * epsilon)
                a = g.view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
