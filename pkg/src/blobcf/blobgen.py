"""Blob-scene latents and the fixed differentiable generator.

A scene is K anisotropic Gaussian blobs plus a background style. Each blob
carries six spatial parameters (cx, cy, log_s, log_a, theta, p) followed by
a style vector of length ``d_s``; the background style comes last. The
generator composites styles with opacity weights, decodes each pixel with a
logistic read-out and blurs the result.

Rendering works on flat float64 tensors of shape ``(D,)`` or ``(B, D)`` so
that autograd supplies exact gradients with respect to every scene entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import DTYPE, make_rng

SPATIAL = ("cx", "cy", "log_s", "log_a", "theta", "p")
N_SPATIAL = len(SPATIAL)
BLUR_RADIUS = 2
INACTIVE_LOGIT = -30.0


def scene_dim(K: int, d_s: int) -> int:
    return K * (N_SPATIAL + d_s) + d_s


@dataclass
class BlobScene:
    """K blobs, each ``spatial`` (6,) and ``style`` (d_s,), plus ``background`` (d_s,)."""

    spatial: np.ndarray
    style: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        self.spatial = np.asarray(self.spatial, dtype=np.float64).reshape(-1, N_SPATIAL)
        self.style = np.asarray(self.style, dtype=np.float64).reshape(self.spatial.shape[0], -1)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(-1)
        if self.spatial.shape[0] < 1:
            raise ValueError("a scene needs at least one blob")
        if self.style.shape[1] != self.background.shape[0]:
            raise ValueError("blob and background style lengths differ")
        if not (np.all(np.isfinite(self.spatial)) and np.all(np.isfinite(self.style))
                and np.all(np.isfinite(self.background))):
            raise ValueError("scene entries must be finite")

    @property
    def K(self) -> int:
        return self.spatial.shape[0]

    @property
    def d_s(self) -> int:
        return self.background.shape[0]

    def flatten(self) -> np.ndarray:
        blobs = np.concatenate([self.spatial, self.style], axis=1).reshape(-1)
        return np.concatenate([blobs, self.background])

    @classmethod
    def unflatten(cls, vec, K: int, d_s: int) -> "BlobScene":
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.shape[0] != scene_dim(K, d_s):
            raise ValueError(f"vector length {vec.shape[0]} != {scene_dim(K, d_s)} for K={K}, d_s={d_s}")
        blobs = vec[: K * (N_SPATIAL + d_s)].reshape(K, N_SPATIAL + d_s)
        return cls(blobs[:, :N_SPATIAL].copy(), blobs[:, N_SPATIAL:].copy(), vec[K * (N_SPATIAL + d_s):].copy())

    def tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.flatten())

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "d_s": self.d_s,
            "order": list(SPATIAL) + ["style[0..d_s)"],
            "blobs": [
                {**{name: float(v) for name, v in zip(SPATIAL, self.spatial[k])},
                 "style": [float(v) for v in self.style[k]]}
                for k in range(self.K)
            ],
            "background": [float(v) for v in self.background],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlobScene":
        spatial = [[b[name] for name in SPATIAL] for b in d["blobs"]]
        style = [b["style"] for b in d["blobs"]]
        return cls(np.array(spatial), np.array(style), np.array(d["background"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "BlobScene":
        return cls.from_dict(json.loads(text))


def blob_slices(K: int, d_s: int, k: int) -> slice:
    width = N_SPATIAL + d_s
    return slice(k * width, (k + 1) * width)


def split_scene(h: torch.Tensor, K: int, d_s: int):
    """View a ``(B, D)`` batch as ``(B, K, 6 + d_s)`` blobs and ``(B, d_s)`` background."""
    blobs = h[..., : K * (N_SPATIAL + d_s)].reshape(*h.shape[:-1], K, N_SPATIAL + d_s)
    return blobs, h[..., K * (N_SPATIAL + d_s):]


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


@dataclass
class GeneratorConfig:
    resolution: int = 64
    d_s: int = 8
    K: int = 20
    seed: int = 0
    blur_sigma: float = 1.0
    decode_weights: np.ndarray | None = None
    decode_bias: float | None = None

    def __post_init__(self):
        if self.decode_weights is None:
            rng = make_rng(self.seed)
            w = rng.normal(0.0, 0.3, self.d_s)
            # intensity channel: fixed positive sign and dominant magnitude
            w[0] = 2.0 + abs(w[0]) * 0.1
            self.decode_weights = w
            self.decode_bias = float(1.0 + rng.normal(0.0, 0.05))
        self.decode_weights = np.asarray(self.decode_weights, dtype=np.float64).reshape(-1)
        if self.decode_weights.shape[0] != self.d_s:
            raise ValueError("decode_weights length must equal d_s")
        if not self.decode_weights[0] > 0:
            raise ValueError("decode_weights[0] must be positive (intensity channel)")
        if self.decode_bias is None:
            self.decode_bias = 0.0

    @property
    def scene_dim(self) -> int:
        return scene_dim(self.K, self.d_s)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "d_s": self.d_s,
            "K": self.K,
            "seed": self.seed,
            "blur_sigma": self.blur_sigma,
            "decode_weights": [float(v) for v in self.decode_weights],
            "decode_bias": float(self.decode_bias),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**{**d, "decode_weights": np.array(d["decode_weights"])})


class Generator:
    """The fixed decoder G: scene vectors to blurred grayscale images in [0, 1]."""

    def __init__(self, config: GeneratorConfig | None = None):
        self.config = config or GeneratorConfig()
        c = self.config
        n = c.resolution
        centers = (torch.arange(n, dtype=DTYPE) + 0.5) / n
        self.ux = centers.view(1, 1, 1, n)
        self.uy = centers.view(1, 1, n, 1)
        self.w = torch.from_numpy(c.decode_weights)
        self.b = float(c.decode_bias)
        kernel = gaussian_kernel(2 * BLUR_RADIUS + 1, c.blur_sigma)
        self.kernel = torch.from_numpy(kernel).view(1, 1, *kernel.shape)

    @property
    def K(self) -> int:
        return self.config.K

    @property
    def d_s(self) -> int:
        return self.config.d_s

    @property
    def resolution(self) -> int:
        return self.config.resolution

    @property
    def scene_dim(self) -> int:
        return self.config.scene_dim

    def _batch(self, h) -> tuple[torch.Tensor, bool]:
        if isinstance(h, BlobScene):
            h = h.tensor()
        h = torch.as_tensor(h, dtype=DTYPE)
        single = h.dim() == 1
        if single:
            h = h.unsqueeze(0)
        if h.shape[-1] != self.scene_dim:
            raise ValueError(f"scene length {h.shape[-1]} != {self.scene_dim}")
        return h, single

    def opacities(self, h) -> torch.Tensor:
        """Per-blob opacity maps ``(B, K, H, W)``."""
        h, single = self._batch(h)
        blobs, _ = split_scene(h, self.K, self.d_s)
        o = opacity_maps(blobs[..., :N_SPATIAL], self.ux, self.uy)
        return o[0] if single else o

    def composite_features(self, h) -> torch.Tensor:
        """Composited style field ``(B, d_s, H, W)``; weights sum to one per pixel."""
        h, single = self._batch(h)
        blobs, bg = split_scene(h, self.K, self.d_s)
        o = opacity_maps(blobs[..., :N_SPATIAL], self.ux, self.uy)
        denom = 1.0 + o.sum(dim=1, keepdim=True)
        feats = (bg[:, :, None, None] + torch.einsum("bkhw,bkc->bchw", o, blobs[..., N_SPATIAL:])) / denom
        return feats[0] if single else feats

    def render(self, h) -> torch.Tensor:
        """Images ``(B, H, W)`` (or ``(H, W)`` for a single scene)."""
        h, single = self._batch(h)
        blobs, bg = split_scene(h, self.K, self.d_s)
        o = opacity_maps(blobs[..., :N_SPATIAL], self.ux, self.uy)
        # decoding is linear in the style, so project styles before compositing
        z_blob = blobs[..., N_SPATIAL:] @ self.w
        z_bg = bg @ self.w
        num = z_bg[:, None, None] + torch.einsum("bkhw,bk->bhw", o, z_blob)
        logit = num / (1.0 + o.sum(dim=1)) + self.b
        y = torch.sigmoid(logit).unsqueeze(1)
        y = F.pad(y, (BLUR_RADIUS,) * 4, mode="reflect")
        y = F.conv2d(y, self.kernel)[:, 0]
        return y[0] if single else y


def opacity_maps(spatial: torch.Tensor, ux: torch.Tensor, uy: torch.Tensor) -> torch.Tensor:
    cx, cy, log_s, log_a, theta, p = spatial.unbind(-1)
    s = torch.exp(log_s)
    a = torch.exp(log_a)
    sx = (s * a)[..., None, None]
    sy = (s / a)[..., None, None]
    c = torch.cos(theta)[..., None, None]
    sn = torch.sin(theta)[..., None, None]
    dx = ux - cx[..., None, None]
    dy = uy - cy[..., None, None]
    xr = c * dx + sn * dy
    yr = -sn * dx + c * dy
    d2 = (xr / sx) ** 2 + (yr / sy) ** 2
    return torch.sigmoid(p)[..., None, None] * torch.exp(-0.5 * d2)


def mahalanobis_sq(spatial, u) -> np.ndarray:
    """Squared Mahalanobis distance of points ``u`` (..., 2) from one blob."""
    cx, cy, log_s, log_a, theta, _ = [float(v) for v in spatial]
    s, a = math.exp(log_s), math.exp(log_a)
    u = np.asarray(u, dtype=np.float64)
    dx = u[..., 0] - cx
    dy = u[..., 1] - cy
    c, sn = math.cos(theta), math.sin(theta)
    xr = c * dx + sn * dy
    yr = -sn * dx + c * dy
    return (xr / (s * a)) ** 2 + (yr / (s / a)) ** 2


def blob_opacity(spatial, u) -> float:
    """Opacity sigma(p) * exp(-d^2 / 2) of one blob at image-fraction point ``u``."""
    p = float(spatial[5])
    return float(1.0 / (1.0 + math.exp(-p)) * np.exp(-0.5 * mahalanobis_sq(spatial, u)))


def pixel_centers(resolution: int) -> np.ndarray:
    """``(H, W, 2)`` array of (x, y) pixel centers in image-fraction units."""
    c = (np.arange(resolution) + 0.5) / resolution
    xs, ys = np.meshgrid(c, c)
    return np.stack([xs, ys], axis=-1)
