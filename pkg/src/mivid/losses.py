"""The four-term training objective.

All reconstruction terms are evaluated on masked frames only; unmasked
frames are copied from the input and carry no learning signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch

from mivid.diffusion import mask_tensor
from mivid.errors import ConfigError, NumericError
from mivid.features import FeatureBackend, lpips_distance


@dataclass(frozen=True)
class LossWeights:
    lambda_mse: float = 1.0
    lambda_l1: float = 1.0
    lambda_perc: float = 0.1
    lambda_lpips: float = 0.1
    adaptive_ramp: bool = False
    backend: str = "proxy"

    lambda_diff = 1.0

    def __post_init__(self):
        for name in ("lambda_mse", "lambda_l1", "lambda_perc", "lambda_lpips"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be finite and nonnegative, got {v}")


@dataclass
class LossReport:
    """Loss components as 0-dim tensors; ``total`` carries the graph."""

    total: torch.Tensor
    diff: torch.Tensor
    pix: torch.Tensor
    perc: torch.Tensor
    lpips: torch.Tensor

    def item(self) -> dict:
        return {k: float(getattr(self, k).detach()) for k in ("total", "diff", "pix", "perc", "lpips")}


def scheduled_weights(w: LossWeights, progress: float) -> LossWeights:
    """Ramp the perceptual weights from 0 over the first half of training when enabled."""
    if not w.adaptive_ramp:
        return w
    scale = min(1.0, max(0.0, progress) / 0.5)
    return replace(w, lambda_perc=w.lambda_perc * scale, lambda_lpips=w.lambda_lpips * scale)


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor, mask) -> torch.Tensor:
    """Mean squared noise error over the masked frames."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    m = mask_tensor(mask, eps).to(eps.dtype)
    count = m.expand_as(eps).sum()
    if count == 0:
        return torch.zeros((), dtype=eps.dtype)
    return ((eps - eps_hat) ** 2 * m).sum() / count


def pixel_loss(x_hat: torch.Tensor, x_target: torch.Tensor, w: LossWeights) -> torch.Tensor:
    if x_hat.shape != x_target.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x_target.shape)}")
    if x_hat.numel() == 0:
        return torch.zeros((), dtype=x_hat.dtype)
    d = x_hat - x_target
    return w.lambda_mse * (d * d).mean() + w.lambda_l1 * d.abs().mean()


def perceptual_loss(x_hat: torch.Tensor, x_target: torch.Tensor, backend: FeatureBackend, w: LossWeights) -> torch.Tensor:
    """Weighted mean absolute activation difference, averaged over layers."""
    if backend is None:
        raise ConfigError("feature backend is not initialized")
    if w.lambda_perc == 0 or x_hat.numel() == 0:
        return torch.zeros((), dtype=x_hat.dtype)
    fa, fb = backend.features(x_hat), backend.features(x_target)
    per_layer = [(a - b).abs().mean() for a, b in zip(fa, fb)]
    return w.lambda_perc * torch.stack(per_layer).mean()


def lpips_loss(x_hat: torch.Tensor, x_target: torch.Tensor, backend: FeatureBackend, w: LossWeights) -> torch.Tensor:
    if backend is None:
        raise ConfigError("feature backend is not initialized")
    if w.lambda_lpips == 0 or x_hat.numel() == 0:
        return torch.zeros((), dtype=x_hat.dtype)
    return w.lambda_lpips * lpips_distance(x_hat, x_target, backend).mean()


def total_loss(diff, pix, perc, lpips) -> LossReport:
    parts = {"diff": diff, "pix": pix, "perc": perc, "lpips": lpips}
    parts = {k: torch.as_tensor(v) for k, v in parts.items()}
    for name, v in parts.items():
        if not torch.isfinite(v).all():
            raise NumericError(f"loss component {name} is not finite ({float(v.detach())})")
    total = parts["diff"] + parts["pix"] + parts["perc"] + parts["lpips"]
    return LossReport(total=total, **parts)


def masked_frames(x: torch.Tensor, mask) -> torch.Tensor:
    """Gather the masked frames of a clip or batch as ``[K, C, H, W]``."""
    m = mask_tensor(mask, x).reshape(x.shape[:-3])
    return x[m]


def training_loss(eps, eps_hat, x_hat, x0, mask, backend: FeatureBackend, w: LossWeights) -> LossReport:
    """Full objective for one batch; ``x_hat`` is the clamped single-step estimate."""
    pred, target = masked_frames(x_hat, mask), masked_frames(x0, mask)
    return total_loss(
        diffusion_loss(eps, eps_hat, mask),
        pixel_loss(pred, target, w),
        perceptual_loss(pred, target, backend, w),
        lpips_loss(pred, target, backend, w),
    )
