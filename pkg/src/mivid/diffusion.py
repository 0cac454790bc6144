"""Noise schedules, mask-aware forward noising and the reverse sampler.

Timesteps are 1-based, ``t in 1..T_d``, with the convention alpha_bar_0 = 1.
Tensors may be a single clip ``[T, C, H, W]`` or a batch ``[B, T, C, H, W]``;
masks are then ``[T]`` or ``[B, T]`` and ``t`` an int or a ``[B]`` tensor.
Unmasked frames are always passed through with ``torch.where`` so they stay
bit-identical to the clean input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import torch

from mivid.errors import ConfigError, StepError
from mivid.masking import MaskVector
from mivid.videodata import VideoSegment

SCHEDULE_KINDS = ("linear", "cosine")
SIGMA_MODES = ("posterior", "zero")

COSINE_OFFSET = 0.008
MAX_BETA = 0.999

Timestep = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T_d: int
    beta: torch.Tensor  # float64, index t-1
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    kind: str = "linear"

    def alpha_bar_at(self, t: torch.Tensor) -> torch.Tensor:
        """alpha_bar indexed by 1-based ``t``, with alpha_bar_0 = 1."""
        padded = torch.cat([torch.ones(1, dtype=self.alpha_bar.dtype), self.alpha_bar])
        return padded[t]


def build_schedule(kind: str = "linear", T_d: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if kind not in SCHEDULE_KINDS:
        raise ConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {kind!r}")
    if T_d < 1:
        raise ConfigError(f"T_d must be >= 1, got {T_d}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        if T_d == 1:
            beta = torch.tensor([beta_start], dtype=torch.float64)
        else:
            beta = torch.linspace(beta_start, beta_end, T_d, dtype=torch.float64)
    else:
        steps = torch.arange(T_d + 1, dtype=torch.float64) / T_d
        f = torch.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        ab = f / f[0]
        beta = (1.0 - ab[1:] / ab[:-1]).clamp(min=1e-12, max=MAX_BETA)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(T_d, beta, alpha, alpha_bar, kind)


@dataclass
class DiffusionState:
    z_t: torch.Tensor
    t: int
    mask: torch.Tensor
    context: torch.Tensor


def _check_t(t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=torch.long)
    if tt.numel() == 0 or int(tt.min()) < 1 or int(tt.max()) > sched.T_d:
        raise StepError(f"timestep {t} outside 1..{sched.T_d}")
    return tt


def mask_tensor(mask, x: torch.Tensor) -> torch.Tensor:
    """Boolean mask broadcastable against ``x``."""
    if isinstance(mask, MaskVector):
        m = torch.tensor(mask.bits, dtype=torch.bool)
    else:
        m = torch.as_tensor(mask).to(torch.bool)
    if m.ndim == x.ndim:
        return m
    frame_dims = 3  # C, H, W
    if x.ndim == 4:
        if m.ndim != 1 or m.shape[0] != x.shape[0]:
            raise ValueError(f"mask shape {tuple(m.shape)} does not fit clip {tuple(x.shape)}")
    elif x.ndim == 5:
        if m.ndim == 1:
            m = m.unsqueeze(0)
        if m.shape[-1] != x.shape[1]:
            raise ValueError(f"mask shape {tuple(m.shape)} does not fit batch {tuple(x.shape)}")
    else:
        raise ValueError(f"expected a [T,C,H,W] or [B,T,C,H,W] tensor, got {tuple(x.shape)}")
    return m.reshape(m.shape + (1,) * frame_dims)


def _coef(values: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Per-sample coefficient reshaped to broadcast against ``x``."""
    v = values.to(x.dtype)
    if v.ndim == 0:
        return v
    if x.ndim != 5:
        raise ValueError("per-sample timesteps need a batched tensor")
    return v.reshape(-1, 1, 1, 1, 1)


def forward_noise(x0: torch.Tensor, mask, t: Timestep, sched: NoiseSchedule,
                  rng: Optional[torch.Generator] = None, eps: Optional[torch.Tensor] = None):
    """Noise only the masked frames of ``x0`` to step ``t``; returns ``(z_t, eps)``."""
    tt = _check_t(t, sched)
    if eps is None:
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    ab = _coef(sched.alpha_bar[tt - 1], x0)
    noised = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    return torch.where(mask_tensor(mask, x0), noised, x0), eps


def predict_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    tt = _check_t(t, sched)
    ab = _coef(sched.alpha_bar[tt - 1], z_t)
    return (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def reconstruct_x0(z_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, mask, sched: NoiseSchedule,
                   x0: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Single-step clean estimate, composited with the known frames.

    Unmasked positions of ``z_t`` already hold the clean frames, so ``x0``
    is only needed when ``z_t`` was produced some other way.
    """
    known = z_t if x0 is None else x0
    return torch.where(mask_tensor(mask, z_t), predict_x0(z_t, eps_hat, t, sched), known)


def posterior_mean(z_t: torch.Tensor, x0_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    tt = _check_t(t, sched)
    ab_t = _coef(sched.alpha_bar[tt - 1], z_t)
    ab_prev = _coef(sched.alpha_bar_at(tt - 1), z_t)
    beta_t = _coef(sched.beta[tt - 1], z_t)
    alpha_t = _coef(sched.alpha[tt - 1], z_t)
    return (ab_prev.sqrt() * beta_t / (1.0 - ab_t)) * x0_hat + (alpha_t.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t)) * z_t


def epsilon_form_mean(z_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    """Mean written directly in terms of the predicted noise."""
    tt = _check_t(t, sched)
    alpha_t = _coef(sched.alpha[tt - 1], z_t)
    ab_t = _coef(sched.alpha_bar[tt - 1], z_t)
    return (z_t - (1.0 - alpha_t) / (1.0 - ab_t).sqrt() * eps_hat) / alpha_t.sqrt()


def posterior_sigma(t: Timestep, sched: NoiseSchedule) -> torch.Tensor:
    tt = _check_t(t, sched)
    ab_t = sched.alpha_bar[tt - 1]
    ab_prev = sched.alpha_bar_at(tt - 1)
    return ((1.0 - ab_prev) / (1.0 - ab_t) * sched.beta[tt - 1]).sqrt()


def reverse_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t: Timestep, mask, sched: NoiseSchedule,
                 rng: Optional[torch.Generator] = None, sigma_mode: str = "posterior",
                 x0: Optional[torch.Tensor] = None, clip_x0: bool = False) -> torch.Tensor:
    """One ancestral step ``z_t -> z_{t-1}`` followed by re-injection of known frames.

    ``x0`` supplies the known frames; by default they are read from the
    unmasked positions of ``z_t``. ``clip_x0`` clamps the clean estimate to
    the pixel range before forming the mean.
    """
    if sigma_mode not in SIGMA_MODES:
        raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}, got {sigma_mode!r}")
    tt = _check_t(t, sched)
    x0_hat = predict_x0(z_t, eps_hat, tt, sched)
    if clip_x0:
        x0_hat = x0_hat.clamp(0.0, 1.0)
    z_prev = posterior_mean(z_t, x0_hat, tt, sched)
    if sigma_mode == "posterior":
        sigma = _coef(posterior_sigma(tt, sched), z_t)
        z_prev = z_prev + sigma * torch.randn(z_t.shape, generator=rng, dtype=z_t.dtype)
    known = z_t if x0 is None else x0
    return torch.where(mask_tensor(mask, z_t), z_prev, known)


@torch.no_grad()
def sample(context, mask, model: Callable, sched: NoiseSchedule, rng: Optional[torch.Generator] = None,
           sigma_mode: str = "posterior", clip_x0: bool = True,
           callback: Optional[Callable[[DiffusionState], None]] = None):
    """Synthesize the masked frames of ``context`` by running the full reverse chain.

    ``model(z_t, context, t)`` must return the predicted noise. Returns a
    ``VideoSegment`` when given one, otherwise a tensor of the input shape.
    """
    segment = context if isinstance(context, VideoSegment) else None
    x0 = segment.frames if segment is not None else context
    m = mask_tensor(mask, x0)
    if not bool(m.any()):
        return context
    visible = torch.where(m, torch.zeros((), dtype=x0.dtype), x0)
    noise = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    z = torch.where(m, noise, x0)
    for t in range(sched.T_d, 0, -1):
        if x0.ndim == 5:
            t_in = torch.full((x0.shape[0],), t, dtype=torch.long)
        else:
            t_in = t
        eps_hat = model(z, visible, t_in)
        z = reverse_step(z, eps_hat, t, m, sched, rng, sigma_mode, x0=x0, clip_x0=clip_x0)
        if callback is not None:
            callback(DiffusionState(z, t - 1, m, visible))
    out = torch.where(m, z.clamp(0.0, 1.0), x0)
    if segment is not None:
        return VideoSegment(out, segment.source_id, segment.frame_indices)
    return out
