"""Adam with bias correction, cosine learning-rate annealing, gradient clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Tuple

import torch

from mivid.errors import NumericError

ADAM_EPS = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: Dict[str, torch.Tensor]) -> "AdamState":
        return cls(0, {k: torch.zeros_like(p) for k, p in params.items()}, {k: torch.zeros_like(p) for k, p in params.items()})


@torch.no_grad()
def adam_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], state: AdamState, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = ADAM_EPS) -> None:
    """Apply one in-place Adam update to ``params`` and advance ``state``.

    Every gradient is checked before anything is modified, so a non-finite
    gradient leaves both parameters and moments untouched.
    """
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


def lr_at(step: int, total_steps: int, lr: float, schedule: str = "cosine_anneal", warmup: int = 0) -> float:
    """Learning rate for 0-based ``step``.

    The first ``warmup`` steps ramp linearly up to ``lr``; the cosine then
    anneals to zero over the remaining steps.
    """
    step = max(step, 0)
    if step < warmup:
        return lr * (step + 1) / warmup
    if schedule == "constant":
        return lr
    span = total_steps - warmup
    if span <= 0:
        return lr
    done = min(step - warmup, span)
    return lr * (1.0 + math.cos(math.pi * done / span)) / 2.0


@torch.no_grad()
def clip_grad_norm(grads: Iterable[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = list(grads)
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g.mul_(scale)
    return total
