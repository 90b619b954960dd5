"""Fixed random-feature convolutional extractor and the perceptual distance.

Two bias-free 5x5 stride-2 ReLU convolutions with seeded He-scaled,
zero-mean weights.
The same features back the perceptual distance, the Frechet statistics,
the classifier head and the encoder head. They stand in for pretrained
VGG/Inception features and are a proxy, not those networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import DTYPE, make_rng

LAYER_CHANNELS = (8, 16)
GRID = 4
NORM_EPS = 1e-8
DC_KEEP = 0.3


@dataclass
class FeatureStack:
    layer1: torch.Tensor  # (B, 8, H/2, W/2)
    layer2: torch.Tensor  # (B, 16, H/4, W/4)
    pooled: torch.Tensor  # (B, 24)
    grid: torch.Tensor  # (B, 256)


class Perceptor:
    def __init__(self, resolution: int = 64, seed: int = 1234):
        if resolution % (4 * GRID):
            raise ValueError(f"resolution must be a multiple of {4 * GRID}")
        self.resolution = resolution
        self.seed = int(seed)
        rng = make_rng(seed)
        c_in = 1
        self.weights = []
        for c_out in LAYER_CHANNELS:
            std = np.sqrt(2.0 / (c_in * 25))
            w = rng.normal(0.0, std, size=(c_out, c_in, 5, 5))
            # keep 30% of each filter's mean: enough DC response that flat regions stay
            # off the ReLU kink, little enough that pooled means respond to local structure
            w -= (1.0 - DC_KEEP) * w.mean(axis=(1, 2, 3), keepdims=True)
            self.weights.append(torch.from_numpy(w))
            c_in = c_out

    def extract(self, images: torch.Tensor) -> FeatureStack:
        """Features for ``(B, H, W)`` or ``(H, W)`` images (always batched output)."""
        x = torch.as_tensor(images, dtype=DTYPE)
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(f"image shape {tuple(x.shape[-2:])} does not match resolution {self.resolution}")
        l1 = F.relu(F.conv2d(x.unsqueeze(1), self.weights[0], stride=2, padding=2))
        l2 = F.relu(F.conv2d(l1, self.weights[1], stride=2, padding=2))
        pooled = torch.cat([l1.mean(dim=(2, 3)), l2.mean(dim=(2, 3))], dim=1)
        grid = F.adaptive_avg_pool2d(l2, GRID).flatten(1)
        return FeatureStack(l1, l2, pooled, grid)

    def pooled(self, images: torch.Tensor) -> torch.Tensor:
        return self.extract(images).pooled

    def perceptual_distance(self, a, b) -> torch.Tensor:
        """Batched distance ``(B,)``; accepts images or precomputed stacks."""
        fa = a if isinstance(a, FeatureStack) else self.extract(a)
        fb = b if isinstance(b, FeatureStack) else self.extract(b)
        total = 0.0
        for la, lb in ((fa.layer1, fb.layer1), (fa.layer2, fb.layer2)):
            total = total + ((_unit(la) - _unit(lb)) ** 2).mean(dim=(1, 2, 3))
        return total


def _unit(f: torch.Tensor) -> torch.Tensor:
    return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + NORM_EPS)
