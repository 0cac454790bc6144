"""Noise-prediction network: 3D conv encoder, temporal attention, skip decoder.

Frames come in as ``[B, T, C, H, W]`` and are processed internally as
``[B, C, T, H, W]``. Downsampling is spatial only, so the temporal length is
kept end to end and the bottleneck attention mixes the T frame tokens at
every spatial position independently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import torch
import torch.nn.functional as F
from torch import nn

from mivid.diffusion import mask_tensor
from mivid.errors import ConfigError, ShapeError, StepError

MAX_PERIOD = 10_000.0


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 3
    base_channels: int = 32
    levels: int = 3
    attention_heads: int = 4
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_channels < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ConfigError("base_channels must be >= 1 and time_embed_dim a positive even number")
        if self.attention_heads < 1 or self.bottleneck_channels % self.attention_heads:
            raise ConfigError(
                f"bottleneck channels {self.bottleneck_channels} not divisible by {self.attention_heads} heads"
            )

    def level_channels(self, i: int) -> int:
        return self.base_channels * 2 ** i

    @property
    def bottleneck_channels(self) -> int:
        return self.level_channels(self.levels - 1)

    @property
    def head_dim(self) -> int:
        return self.bottleneck_channels // self.attention_heads

    @property
    def spatial_factor(self) -> int:
        return 2 ** (self.levels - 1)


@dataclass
class ConditioningFeatures:
    bottleneck: torch.Tensor  # [B, D, T, H', W']
    skips: List[torch.Tensor]


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """``[B] -> [B, dim]`` sin/cos features at geometrically spaced frequencies."""
    half = dim // 2
    freqs = torch.exp(-math.log(MAX_PERIOD) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def conv3(c_in: int, c_out: int, stride=1) -> nn.Conv3d:
    return nn.Conv3d(c_in, c_out, kernel_size=3, stride=stride, padding=1)


class EncoderLevel(nn.Module):
    def __init__(self, c_in: int, c_out: int, temb_dim: int, downsample: bool):
        super().__init__()
        self.conv1 = conv3(c_in, c_out, stride=(1, 2, 2) if downsample else 1)
        self.time_proj = nn.Linear(temb_dim, c_out)
        self.conv2 = conv3(c_out, c_out)

    def forward(self, x, temb):
        h = self.conv1(x) + self.time_proj(temb)[:, :, None, None, None]
        h = F.gelu(h)
        return F.gelu(self.conv2(h))


class DecoderLevel(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.up_conv = conv3(c_in, c_out)
        self.merge_conv = conv3(2 * c_out, c_out)

    def forward(self, x, skip):
        h = F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
        h = F.gelu(self.up_conv(h))
        if h.shape != skip.shape:
            raise ShapeError(f"skip shape {tuple(skip.shape)} does not match upsampled {tuple(h.shape)}")
        return F.gelu(self.merge_conv(torch.cat([h, skip], dim=1)))


class TemporalAttention(nn.Module):
    """Multi-head self-attention over time with a residual connection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _tokens(self, h):
        B, D, T, H, W = h.shape
        # one length-T sequence per spatial position
        return h.permute(0, 3, 4, 2, 1).reshape(B * H * W, T, D)

    def _split(self, x):
        n, T, _ = x.shape
        return x.reshape(n, T, self.heads, self.head_dim).transpose(1, 2)

    def attention_weights(self, h: torch.Tensor) -> torch.Tensor:
        """``[B*H'*W', heads, T, T]`` softmax weights."""
        tok = self._tokens(h)
        q, k = self._split(self.q_proj(tok)), self._split(self.k_proj(tok))
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        B, D, T, H, W = h.shape
        tok = self._tokens(h)
        weights = self.attention_weights(h)
        v = self._split(self.v_proj(tok))
        out = (weights @ v).transpose(1, 2).reshape(B * H * W, T, D)
        out = self.out_proj(out)
        return h + out.reshape(B, H, W, T, D).permute(0, 4, 3, 1, 2)


class TimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        e = sinusoidal_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(F.gelu(self.fc1(e)))


class NoisePredictor(nn.Module):
    """Predicts the diffusion noise from ``(z_t, visible context, t)``.

    The noisy clip and the zero-filled context are concatenated along the
    channel axis. The output head starts at zero, so a fresh model predicts
    zero noise.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        C = cfg.channels
        self.time_embed = TimeEmbedding(cfg.time_embed_dim)
        self.encoder = nn.ModuleList()
        c_prev = 2 * C
        for i in range(cfg.levels):
            c = cfg.level_channels(i)
            self.encoder.append(EncoderLevel(c_prev, c, cfg.time_embed_dim, downsample=i > 0))
            c_prev = c
        self.attention = TemporalAttention(cfg.bottleneck_channels, cfg.attention_heads)
        self.decoder = nn.ModuleList(
            DecoderLevel(cfg.level_channels(i + 1), cfg.level_channels(i)) for i in reversed(range(cfg.levels - 1))
        )
        self.head = conv3(cfg.base_channels, C)

    def _check_input(self, z_t, context):
        if z_t.shape != context.shape:
            raise ShapeError(f"z_t {tuple(z_t.shape)} and context {tuple(context.shape)} differ")
        if z_t.ndim != 5:
            raise ShapeError(f"expected [B, T, C, H, W], got {tuple(z_t.shape)}")
        _, _, C, H, W = z_t.shape
        f = self.cfg.spatial_factor
        if C != self.cfg.channels:
            raise ShapeError(f"model expects {self.cfg.channels} channels, got {C}")
        if H % f or W % f:
            raise ShapeError(f"H, W = {H}, {W} must be divisible by {f}")

    def encode(self, z_t, context, temb) -> ConditioningFeatures:
        self._check_input(z_t, context)
        x = torch.cat([z_t, context], dim=2).permute(0, 2, 1, 3, 4)
        skips = []
        h = x
        for i, level in enumerate(self.encoder):
            if i > 0:
                skips.append(h)
            h = level(h, temb)
        return ConditioningFeatures(h, skips)

    def temporal_attention(self, h):
        return self.attention(h)

    def decode(self, feats: ConditioningFeatures) -> torch.Tensor:
        if len(feats.skips) != self.cfg.levels - 1:
            raise ShapeError(f"expected {self.cfg.levels - 1} skips, got {len(feats.skips)}")
        h = feats.bottleneck
        for level, skip in zip(self.decoder, reversed(feats.skips)):
            h = level(h, skip)
        return self.head(h).permute(0, 2, 1, 3, 4)

    def forward(self, z_t: torch.Tensor, context: torch.Tensor, t) -> torch.Tensor:
        single = z_t.ndim == 4
        if single:
            z_t, context = z_t[None], context[None]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(z_t.shape[0])
        temb = self.time_embed(t)
        feats = self.encode(z_t, context, temb)
        feats = ConditioningFeatures(self.temporal_attention(feats.bottleneck), feats.skips)
        out = self.decode(feats)
        return out[0] if single else out


def init_params(cfg: ModelConfig, seed: int, dtype=torch.float32) -> NoisePredictor:
    """Build a model with deterministic fan-in-scaled uniform weights and zero biases."""
    model = NoisePredictor(cfg).to(dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, module in model.named_modules():
            if isinstance(module, (nn.Conv3d, nn.Linear)):
                fan_in = module.weight[0].numel()
                # He bound for convs feeding GELU, LeCun bound for projections
                gain = 6.0 if isinstance(module, nn.Conv3d) else 3.0
                bound = math.sqrt(gain / fan_in)
                module.weight.uniform_(-bound, bound, generator=g)
                module.bias.zero_()
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict_noise(model: NoisePredictor, z_t, context, mask, t, sched) -> torch.Tensor:
    """Noise estimate with the masked frames of the context zeroed out."""
    tt = torch.as_tensor(t, dtype=torch.long)
    if int(tt.min()) < 1 or int(tt.max()) > sched.T_d:
        raise StepError(f"timestep {t} outside 1..{sched.T_d}")
    visible = torch.where(mask_tensor(mask, context), torch.zeros((), dtype=context.dtype), context)
    return model(z_t, visible, tt)


def time_embed(model: NoisePredictor, t, sched) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if int(tt.min()) < 1 or int(tt.max()) > sched.T_d:
        raise StepError(f"timestep {t} outside 1..{sched.T_d}")
    return model.time_embed(tt)
