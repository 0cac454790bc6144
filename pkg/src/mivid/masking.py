"""Whole-frame masking strategies.

Endpoints (index 0 and T-1) are the conditioning context and are never
masked. Every strategy draws one uniform variate per intermediate frame from
the supplied ``torch.Generator``, so a hybrid mask can be replayed by calling
the individual strategies in order on a cloned generator.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from mivid.errors import ConfigError
from mivid.videodata import VideoSegment

logger = logging.getLogger(__name__)

STRATEGIES = ("random", "motion", "curriculum")
RAMPS = ("linear", "cosine")
FILLS = ("gaussian_noise", "constant")

HYBRID_RETRIES = 8


@dataclass(frozen=True)
class MaskConfig:
    p_r: float = 0.25
    p_m: float = 0.5
    p_min: float = 0.1
    p_max: float = 0.5
    E_max: int = 100
    ramp: str = "cosine"
    fill: str = "gaussian_noise"
    constant_value: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_min <= self.p_max <= 1.0:
            raise ConfigError(f"need 0 <= p_min <= p_max <= 1, got {self.p_min}, {self.p_max}")
        if not 0.0 <= self.p_r <= 1.0:
            raise ConfigError(f"p_r must be a probability, got {self.p_r}")
        if not self.p_m >= 0.0:
            raise ConfigError(f"p_m must be nonnegative, got {self.p_m}")
        if self.E_max < 1:
            raise ConfigError("E_max must be >= 1")
        if self.ramp not in RAMPS:
            raise ConfigError(f"ramp must be one of {RAMPS}")
        if self.fill not in FILLS:
            raise ConfigError(f"fill must be one of {FILLS}")


@dataclass(frozen=True)
class MaskVector:
    """Per-frame mask bits (1 = masked) with the strategies that set each bit."""

    bits: tuple
    strategy_tags: tuple = ()

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if any(b not in (0, 1) for b in bits):
            raise ValueError("mask bits must be 0 or 1")
        if len(bits) >= 1 and (bits[0] or bits[-1]):
            raise ValueError("endpoint frames cannot be masked")
        object.__setattr__(self, "bits", bits)
        if not self.strategy_tags:
            tags = tuple(frozenset() for _ in bits)
        else:
            tags = tuple(frozenset(t) for t in self.strategy_tags)
            if len(tags) != len(bits):
                raise ValueError("strategy_tags length does not match bits")
        object.__setattr__(self, "strategy_tags", tags)

    @classmethod
    def from_indices(cls, T: int, indices, tag=None) -> "MaskVector":
        bits = [0] * T
        for i in indices:
            bits[i] = 1
        tags = [frozenset({tag}) if (tag and b) else frozenset() for b in bits]
        return cls(tuple(bits), tuple(tags))

    @property
    def T(self) -> int:
        return len(self.bits)

    @property
    def count(self) -> int:
        return sum(self.bits)

    @property
    def indices(self) -> list:
        return [i for i, b in enumerate(self.bits) if b]

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.bits, dtype=dtype)

    def __or__(self, other: "MaskVector") -> "MaskVector":
        if self.T != other.T:
            raise ValueError("mask lengths differ")
        return MaskVector(
            tuple(a | b for a, b in zip(self.bits, other.bits)),
            tuple(a | b for a, b in zip(self.strategy_tags, other.strategy_tags)),
        )


def _bernoulli_intermediate(T: int, probs: torch.Tensor, rng: torch.Generator, tag: str) -> MaskVector:
    u = torch.rand(T - 2, generator=rng, dtype=torch.float64)
    inner = (u < probs).tolist()
    return MaskVector.from_indices(T, [i + 1 for i, b in enumerate(inner) if b], tag)


def _check_T(T: int) -> None:
    if T < 3:
        raise ValueError(f"masking needs T >= 3, got {T}")


def random_mask(T: int, p_r: float, rng: torch.Generator) -> MaskVector:
    _check_T(T)
    return _bernoulli_intermediate(T, torch.full((T - 2,), float(p_r), dtype=torch.float64), rng, "random")


def motion_intensity(frames: torch.Tensor) -> torch.Tensor:
    """L2 norm of consecutive frame differences; entry k is between frames k and k+1."""
    diff = (frames[1:] - frames[:-1]).to(torch.float64)
    return diff.flatten(1).norm(dim=1)


def motion_probabilities(segment: VideoSegment, p_m: float) -> torch.Tensor:
    """Masking probability for each intermediate frame (length T-2).

    Frame t uses the motion from frame t-1 to t, normalized by the total
    motion of the clip and clamped to [0, 1]. A static clip falls back to the
    uniform ``p_m / (T - 2)``.
    """
    T = segment.T
    _check_T(T)
    delta = motion_intensity(segment.frames)
    total = float(delta.sum())
    if total <= 0.0:
        return torch.full((T - 2,), min(p_m / (T - 2), 1.0), dtype=torch.float64)
    return (p_m * delta[: T - 2] / total).clamp(0.0, 1.0)


def motion_mask(segment: VideoSegment, p_m: float, rng: torch.Generator) -> MaskVector:
    return _bernoulli_intermediate(segment.T, motion_probabilities(segment, p_m), rng, "motion")


def curriculum_rate(e: int, cfg: MaskConfig) -> float:
    """Masking ratio at epoch ``e``, ramping from ``p_min`` to ``p_max`` over ``E_max`` epochs."""
    if e < 0:
        raise ConfigError(f"epoch must be nonnegative, got {e}")
    if e > cfg.E_max:
        logger.warning("epoch %d beyond E_max %d; clamping", e, cfg.E_max)
        e = cfg.E_max
    if e == 0:
        return cfg.p_min
    if e == cfg.E_max:
        return cfg.p_max
    frac = e / cfg.E_max
    if cfg.ramp == "cosine":
        frac = (1.0 - math.cos(math.pi * frac)) / 2.0
    return cfg.p_min + (cfg.p_max - cfg.p_min) * frac


def curriculum_mask(T: int, e: int, cfg: MaskConfig, rng: torch.Generator) -> MaskVector:
    _check_T(T)
    rate = curriculum_rate(e, cfg)
    return _bernoulli_intermediate(T, torch.full((T - 2,), rate, dtype=torch.float64), rng, "curriculum")


def hybrid_mask(segment: VideoSegment, e: int, cfg: MaskConfig, rng: torch.Generator) -> MaskVector:
    """OR of the random, motion and curriculum masks, guaranteed nonempty.

    Draw order per attempt is random, motion, curriculum. After
    ``HYBRID_RETRIES`` empty attempts the center frame is masked and tagged
    ``"forced"``.
    """
    T = segment.T
    for _ in range(HYBRID_RETRIES):
        m = random_mask(T, cfg.p_r, rng) | motion_mask(segment, cfg.p_m, rng) | curriculum_mask(T, e, cfg, rng)
        if m.count:
            return m
    return MaskVector.from_indices(T, [T // 2], "forced")


def apply_mask(segment: VideoSegment, mask: MaskVector, cfg: MaskConfig, rng: torch.Generator):
    """Replace masked frames with noise (or a constant).

    Returns ``(masked, target, mask)`` where ``masked`` has the segment's
    shape and ``target`` stacks the original masked frames as ``[K, C, H, W]``.
    """
    frames = segment.frames
    if mask.T != frames.shape[0]:
        raise ValueError(f"mask length {mask.T} != segment length {frames.shape[0]}")
    idx = mask.indices
    masked = frames.clone()
    if idx:
        shape = (len(idx),) + tuple(frames.shape[1:])
        if cfg.fill == "gaussian_noise":
            fill = torch.randn(shape, generator=rng, dtype=frames.dtype)
        else:
            fill = torch.full(shape, cfg.constant_value, dtype=frames.dtype)
        masked[idx] = fill
    return masked, frames[idx].clone(), mask
