"""Feature backends for the perceptual and LPIPS-style terms.

A backend maps a batch of images ``[N, C, H, W]`` in ``[0, 1]`` to a list of
activation maps and supplies one nonnegative weight vector per layer. The
default ``proxy`` backend is a small fixed conv pyramid with seeded random
weights. It is a perceptual proxy only; its distances are not comparable to
published LPIPS numbers computed with pre-trained networks.
"""

from __future__ import annotations

import abc
import math
from typing import Callable, Dict, List

import torch
import torch.nn.functional as F

from mivid.errors import ConfigError

NORM_EPS = 1e-10


class FeatureBackend(abc.ABC):
    name: str = "backend"

    @abc.abstractmethod
    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        """Raw activations, one ``[N, C_l, H_l, W_l]`` map per layer."""

    @abc.abstractmethod
    def layer_weights(self) -> List[torch.Tensor]:
        """Per-channel weights ``w_l`` of shape ``[C_l]``."""


class ProxyBackend(FeatureBackend):
    """Three-layer ReLU conv pyramid, weights drawn from a fixed seed."""

    name = "proxy-v1"

    def __init__(self, widths=(8, 16, 32), seed: int = 0):
        g = torch.Generator().manual_seed(seed)
        self.kernels = []
        self.strides = []
        c_in = 3
        for i, c_out in enumerate(widths):
            fan_in = c_in * 9
            self.kernels.append(torch.randn(c_out, c_in, 3, 3, generator=g, dtype=torch.float64) * math.sqrt(2.0 / fan_in))
            self.strides.append(1 if i == 0 else 2)
            c_in = c_out
        self.weights = [torch.rand(c, generator=g, dtype=torch.float64) for c in widths]

    def features(self, x):
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        h = 2.0 * x - 1.0
        out = []
        for k, s in zip(self.kernels, self.strides):
            h = F.relu(F.conv2d(h, k.to(h.dtype), stride=s, padding=1))
            out.append(h)
        return out

    def layer_weights(self):
        return list(self.weights)


BACKENDS: Dict[str, Callable[[], FeatureBackend]] = {"proxy": ProxyBackend}


def register_backend(name: str, factory: Callable[[], FeatureBackend]) -> None:
    """Make an external feature extractor (e.g. pre-trained weights) selectable by name."""
    BACKENDS[name] = factory


def get_backend(name: str) -> FeatureBackend:
    try:
        return BACKENDS[name]()
    except KeyError:
        raise ConfigError(f"unknown feature backend {name!r}; known: {sorted(BACKENDS)}") from None


def unit_normalize(y: torch.Tensor) -> torch.Tensor:
    """Normalize activations to unit length along the channel axis."""
    return y * torch.rsqrt((y * y).sum(dim=1, keepdim=True) + NORM_EPS ** 2)


def lpips_distance(a: torch.Tensor, b: torch.Tensor, backend: FeatureBackend) -> torch.Tensor:
    """Per-image weighted distance between unit-normalized activations, shape ``[N]``."""
    if backend is None:
        raise ConfigError("feature backend is not initialized")
    total = torch.zeros(a.shape[0], dtype=a.dtype)
    for fa, fb, w in zip(backend.features(a), backend.features(b), backend.layer_weights()):
        d = (unit_normalize(fa) - unit_normalize(fb)) * w.to(a.dtype)[None, :, None, None]
        total = total + (d * d).sum(dim=1).mean(dim=(1, 2))
    return total
