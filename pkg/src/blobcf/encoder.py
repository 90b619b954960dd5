"""Affine encoder from perceptor grid features to scene vectors.

Trained in two phases: pretraining regresses scenes from their own
renderings; finetuning adds image reconstruction, perceptual and
decision-consistency terms on real images, alternated 1:1 with
re-encoding of generated images.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
import torch

from .blobgen import Generator, N_SPATIAL, scene_dim
from .classifier import ClassifierModel
from .numerics import AdamState, adam_step
from .perceptor import Perceptor

log = logging.getLogger(__name__)

UNTRAINED, PRETRAINED, FINETUNED = "untrained", "pretrained", "finetuned"
PHASES = (UNTRAINED, PRETRAINED, FINETUNED)


@dataclass
class ScenePrior:
    """Independent uniform/normal prior over every scene entry."""

    K: int
    d_s: int
    cx: tuple = (0.2, 0.8)
    cy: tuple = (0.2, 0.8)
    log_s: tuple = (math.log(0.05), math.log(0.4))
    log_a: tuple = (-0.5, 0.5)
    theta: tuple = (-math.pi, math.pi)
    p: tuple = (0.0, 3.0)
    background: tuple | None = None

    def _bg(self) -> np.ndarray:
        if self.background is not None:
            return np.asarray(self.background, dtype=np.float64)
        bg = np.zeros(self.d_s)
        bg[0] = -2.0
        return bg

    def sample(self, rng: np.random.Generator, n: int) -> torch.Tensor:
        lo = np.array([self.cx[0], self.cy[0], self.log_s[0], self.log_a[0], self.theta[0], self.p[0]])
        hi = np.array([self.cx[1], self.cy[1], self.log_s[1], self.log_a[1], self.theta[1], self.p[1]])
        spatial = rng.uniform(lo, hi, size=(n, self.K, N_SPATIAL))
        style = rng.normal(0.0, 1.0, size=(n, self.K, self.d_s))
        blobs = np.concatenate([spatial, style], axis=2).reshape(n, -1)
        bg = np.broadcast_to(self._bg(), (n, self.d_s))
        return torch.from_numpy(np.concatenate([blobs, bg], axis=1))

    def mean(self) -> np.ndarray:
        spatial = np.array([np.mean(r) for r in (self.cx, self.cy, self.log_s, self.log_a, self.theta, self.p)])
        blob = np.concatenate([spatial, np.zeros(self.d_s)])
        return np.concatenate([np.tile(blob, self.K), self._bg()])


@dataclass
class EncoderModel:
    K: int
    d_s: int
    weight: np.ndarray  # (256, D)
    offset: np.ndarray  # (D,)
    feature_mean: np.ndarray | None = None  # (256,) fixed standardisation
    feature_scale: np.ndarray | None = None
    perceptor_seed: int = 1234
    resolution: int = 64
    phase: str = UNTRAINED
    traces: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(-1)
        n_in = self.weight.shape[0]
        self.feature_mean = np.zeros(n_in) if self.feature_mean is None else np.asarray(self.feature_mean, dtype=np.float64)
        self.feature_scale = np.ones(n_in) if self.feature_scale is None else np.asarray(self.feature_scale, dtype=np.float64)
        self._mu = torch.from_numpy(self.feature_mean)
        self._sd = torch.from_numpy(self.feature_scale)
        if self.offset.shape[0] != scene_dim(self.K, self.d_s):
            raise ValueError("offset length does not match (K, d_s)")
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")
        self._perceptor = Perceptor(self.resolution, self.perceptor_seed)

    @classmethod
    def initialize(cls, K, d_s, prior, generator: Generator | None = None,
                   rng: np.random.Generator | None = None, n_calib: int = 512,
                   perceptor_seed: int = 1234, resolution: int = 64) -> "EncoderModel":
        """Zero weights and the offset at the prior mean.

        With ``generator`` and ``rng`` the grid features are standardised
        using ``n_calib`` rendered prior samples and scaled by
        1/sqrt(fan-in), a fixed affine pre-map. The fan-in factor keeps a
        per-weight Adam step of size lr from moving every output by
        roughly lr * 256.
        """
        D = scene_dim(K, d_s)
        n_in = 256
        model = cls(K, d_s, np.zeros((n_in, D)), np.array(prior.mean(), dtype=np.float64),
                    perceptor_seed=perceptor_seed, resolution=resolution)
        if generator is not None and rng is not None:
            with torch.no_grad():
                feats = torch.cat([
                    model.perceptor.extract(generator.render(prior.sample(rng, 64))).grid
                    for _ in range(max(1, n_calib // 64))
                ])
            model.feature_mean = feats.mean(0).numpy()
            sd = feats.std(0)
            # features that are (nearly) dead on the calibration set must not blow up elsewhere
            sd = sd.clamp_min(0.01 * float(sd.mean()) + 1e-12)
            model.feature_scale = (sd * math.sqrt(n_in)).numpy()
            model._mu = torch.from_numpy(model.feature_mean)
            model._sd = torch.from_numpy(model.feature_scale)
        return model

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return (self.perceptor.extract(images).grid - self._mu) / self._sd

    @property
    def perceptor(self) -> Perceptor:
        return self._perceptor

    def params(self) -> torch.Tensor:
        return torch.from_numpy(np.concatenate([self.weight.reshape(-1), self.offset]))

    def set_params(self, vec: torch.Tensor) -> None:
        v = vec.detach().numpy()
        n = self.weight.size
        self.weight = v[:n].reshape(self.weight.shape).copy()
        self.offset = v[n:].copy()

    def apply(self, params: torch.Tensor, images: torch.Tensor) -> torch.Tensor:
        """Differentiable encoding of ``(B, H, W)`` images under a flat parameter vector."""
        n = self.weight.size
        W = params[:n].reshape(self.weight.shape)
        return self.features(images) @ W + params[n:]

    def encode_batch(self, images) -> torch.Tensor:
        if self.phase == UNTRAINED:
            raise RuntimeError("encoder has not been trained")
        with torch.no_grad():
            return self.apply(self.params(), torch.as_tensor(images))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "d_s": self.d_s,
            "weight": self.weight.tolist(),
            "offset": self.offset.tolist(),
            "feature_mean": self.feature_mean.tolist(),
            "feature_scale": self.feature_scale.tolist(),
            "perceptor_seed": self.perceptor_seed,
            "resolution": self.resolution,
            "phase": self.phase,
            "traces": self.traces,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderModel":
        d = json.loads(json.dumps(d))
        return cls(**{**d, "weight": np.array(d["weight"]), "offset": np.array(d["offset"])})

    @classmethod
    def load(cls, path) -> "EncoderModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def write_traces_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "step", "term", "value"])
            for phase, terms in self.traces.items():
                for term, values in terms.items():
                    for step, value in enumerate(values):
                        w.writerow([phase, step, term, repr(float(value))])


def encode(model: EncoderModel, image) -> torch.Tensor:
    """Scene vector for one image."""
    return model.encode_batch(torch.as_tensor(image).unsqueeze(0))[0]


def latent_loss(h: torch.Tensor, h_hat: torch.Tensor) -> torch.Tensor:
    return ((h - h_hat) ** 2).mean()


def pretrain_encoder(model: EncoderModel, prior, generator: Generator, steps: int,
                     rng: np.random.Generator, lr: float = 0.002, batch_size: int = 8) -> EncoderModel:
    """Adam on ``mean ||h - E(G(h))||^2`` with ``h`` drawn fresh from ``prior`` each step."""
    if steps < 1:
        return model
    params = model.params()
    state = AdamState(lr=lr)
    trace = []
    for step in range(steps):
        h = prior.sample(rng, batch_size)
        with torch.no_grad():
            feats = model.features(generator.render(h))
        p = params.clone().requires_grad_(True)
        n = model.weight.size
        loss = latent_loss(h, feats @ p[:n].reshape(model.weight.shape) + p[n:])
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite pretraining loss at step {step}")
        (g,) = torch.autograd.grad(loss, p)
        params = adam_step(params, g, state)
        trace.append(float(loss.detach()))
    model.set_params(params)
    model.phase = PRETRAINED
    model.traces["pretrain"] = {"latent": trace}
    return model


@dataclass
class FinetuneWeights:
    lpips: float = 1.0
    latent: float = 0.1
    decision: float = 0.1


def finetune_terms(model: EncoderModel, params, images, generator: Generator, classifier: ClassifierModel):
    """Per-image real-batch terms: pixel L2, perceptual, decision-feature L2."""
    h_hat = model.apply(params, images)
    recon = generator.render(h_hat)
    pixel = ((recon - images) ** 2).mean(dim=(1, 2))
    fq = classifier.perceptor.extract(images)
    fr = classifier.perceptor.extract(recon)
    perceptual = classifier.perceptor.perceptual_distance(fq, fr)
    decision = ((fq.pooled - fr.pooled) ** 2).mean(dim=1)
    return pixel, perceptual, decision


def finetune_encoder(model: EncoderModel, real_images, prior, generator: Generator,
                     classifier: ClassifierModel, weights: FinetuneWeights | None = None,
                     steps: int = 2000, rng: np.random.Generator | None = None,
                     lr: float = 0.002, batch_size: int = 8) -> EncoderModel:
    """Even steps use a real batch, odd steps a generated batch (1:1)."""
    if model.phase == UNTRAINED:
        raise RuntimeError("finetuning requires a pretrained encoder")
    if not classifier.frozen:
        raise RuntimeError("classifier must be frozen")
    weights = weights or FinetuneWeights()
    rng = rng if rng is not None else np.random.default_rng(0)
    real_images = torch.as_tensor(real_images)
    params = model.params()
    state = AdamState(lr=lr)
    traces = {"pixel": [], "perceptual": [], "decision": [], "latent": []}
    n = model.weight.size
    for step in range(steps):
        p = params.clone().requires_grad_(True)
        if step % 2 == 0:
            idx = torch.from_numpy(rng.integers(0, real_images.shape[0], batch_size))
            pixel, perceptual, decision = finetune_terms(model, p, real_images[idx], generator, classifier)
            pixel, perceptual, decision = pixel.mean(), perceptual.mean(), decision.mean()
            loss = pixel + weights.lpips * perceptual + weights.decision * decision
            traces["pixel"].append(float(pixel.detach()))
            traces["perceptual"].append(float(perceptual.detach()))
            traces["decision"].append(float(decision.detach()))
        else:
            h = prior.sample(rng, batch_size)
            with torch.no_grad():
                feats = model.features(generator.render(h))
            latent = latent_loss(h, feats @ p[:n].reshape(model.weight.shape) + p[n:])
            loss = weights.latent * latent
            traces["latent"].append(float(latent.detach()))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite finetuning loss at step {step}")
        (g,) = torch.autograd.grad(loss, p)
        params = adam_step(params, g, state)
    model.set_params(params)
    model.phase = FINETUNED
    model.traces["finetune"] = traces
    return model


def smoothed(trace, window: int = 50) -> tuple[float, float]:
    """Mean of the first and last ``window`` entries."""
    t = np.asarray(trace, dtype=np.float64)
    w = min(window, len(t))
    return float(t[:w].mean()), float(t[-w:].mean())
