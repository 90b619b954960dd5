"""Seeded "organ + optional lesion" phantoms rendered by the blob generator.

Slot layout: slot 0 is the organ, slots 1..3 hold texture blobs, the last
slot is reserved for the lesion, and every unused slot sits at presence
logit -30 with canonical placeholder values.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
import torch

from .blobgen import INACTIVE_LOGIT, BlobScene, Generator, N_SPATIAL, mahalanobis_sq
from .numerics import child_seed, make_rng

R_HALF = math.sqrt(2.0 * math.log(2.0))
LESION_MIN_LOGIT = 2.0
BACKGROUND_LEVEL = -2.0
MAX_PLACEMENT_ATTEMPTS = 100


class PlacementError(RuntimeError):
    pass


@dataclass
class PhantomSample:
    scene: BlobScene
    image: np.ndarray
    label: int
    seed: int


def background_style(d_s: int) -> np.ndarray:
    bg = np.zeros(d_s)
    bg[0] = BACKGROUND_LEVEL
    return bg


def inactive_blob(d_s: int) -> tuple[np.ndarray, np.ndarray]:
    return np.array([0.5, 0.5, math.log(0.1), 0.0, 0.0, INACTIVE_LOGIT]), np.zeros(d_s)


def lesion_slot(K: int) -> int:
    return K - 1


def label_of(scene: BlobScene) -> int:
    return int(scene.spatial[lesion_slot(scene.K), 5] >= LESION_MIN_LOGIT)


def half_peak_extent(spatial) -> tuple[float, float]:
    """Half-widths along x and y of the blob's half-peak ellipse."""
    s, a, th = math.exp(spatial[2]), math.exp(spatial[3]), spatial[4]
    sx, sy = s * a, s / a
    ex = R_HALF * math.sqrt((sx * math.cos(th)) ** 2 + (sy * math.sin(th)) ** 2)
    ey = R_HALF * math.sqrt((sx * math.sin(th)) ** 2 + (sy * math.cos(th)) ** 2)
    return ex, ey


def _style(rng, d_s, level):
    psi = rng.normal(0.0, 0.1, d_s)
    psi[0] = level
    return psi


def _inside(rng, organ, scale_lo, scale_hi, need_in_bounds, seed):
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        blob = np.array([
            rng.uniform(0.0, 1.0),
            rng.uniform(0.0, 1.0),
            math.log(rng.uniform(scale_lo, scale_hi)),
            rng.uniform(-0.3, 0.3),
            rng.uniform(-math.pi, math.pi),
            0.0,
        ])
        if mahalanobis_sq(organ, blob[:2]) > R_HALF**2:
            continue
        if need_in_bounds:
            ex, ey = half_peak_extent(blob)
            if not (ex <= blob[0] <= 1 - ex and ey <= blob[1] <= 1 - ey):
                continue
        return blob
    raise PlacementError(f"blob placement failed after {MAX_PLACEMENT_ATTEMPTS} attempts (seed {seed})")


def sample_scene(rng: np.random.Generator, K: int, d_s: int, label: int, seed: int = -1) -> BlobScene:
    if K < 3:
        raise ValueError("phantoms need K >= 3 (organ, texture, lesion)")
    spatial = np.empty((K, N_SPATIAL))
    style = np.empty((K, d_s))
    for k in range(K):
        spatial[k], style[k] = inactive_blob(d_s)

    spatial[0] = [
        rng.uniform(0.42, 0.58),
        rng.uniform(0.42, 0.58),
        math.log(rng.uniform(0.25, 0.35)),
        rng.uniform(-0.25, 0.25),
        rng.uniform(-math.pi, math.pi),
        rng.uniform(3.0, 4.0),
    ]
    style[0] = _style(rng, d_s, rng.uniform(0.8, 1.2))

    n_tex = min(int(rng.integers(1, 4)), K - 2)
    for k in range(1, 1 + n_tex):
        blob = _inside(rng, spatial[0], 0.08, 0.16, False, seed)
        blob[5] = rng.uniform(0.5, 2.0)
        spatial[k] = blob
        style[k] = _style(rng, d_s, rng.uniform(-0.5, 0.8))

    if label == 1:
        k = lesion_slot(K)
        blob = _inside(rng, spatial[0], 0.03, 0.07, True, seed)
        blob[5] = rng.uniform(2.5, 4.0)
        spatial[k] = blob
        style[k] = _style(rng, d_s, rng.uniform(2.0, 3.0))
    return BlobScene(spatial, style, background_style(d_s))


class PhantomPrior:
    """Scene prior matching the phantom distribution (lesion present w.p. 1/2)."""

    def __init__(self, K: int, d_s: int):
        self.K = K
        self.d_s = d_s

    def sample(self, rng: np.random.Generator, n: int) -> torch.Tensor:
        out = []
        for _ in range(n):
            label = int(rng.integers(0, 2))
            out.append(sample_scene(rng, self.K, self.d_s, label).flatten())
        return torch.from_numpy(np.stack(out))

    def mean(self) -> np.ndarray:
        rng = make_rng(0)
        return self.sample(rng, 2000).mean(0).numpy()


def synthesize_dataset(n_per_class: int, generator: Generator, rng: np.random.Generator):
    """Balanced labelled phantoms, alternating labels 0, 1, 0, 1, ...

    Returns the samples and a manifest dict (without image paths).
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    K, d_s = generator.K, generator.d_s
    samples = []
    for i in range(2 * n_per_class):
        seed = child_seed(rng)
        label = i % 2
        scene = sample_scene(make_rng(seed), K, d_s, label, seed)
        with torch.no_grad():
            image = generator.render(scene.tensor()).numpy()
        samples.append(PhantomSample(scene, image, label, seed))
    return samples, manifest(samples, generator)


def assign_splits(n: int) -> list[str]:
    """5/7 train, 1/7 val, 1/7 test, contiguous in sample order."""
    n_train = round(n * 5 / 7)
    n_val = round(n / 7)
    return ["train"] * n_train + ["val"] * n_val + ["test"] * (n - n_train - n_val)


def manifest(samples, generator: Generator) -> dict:
    splits = assign_splits(len(samples))
    entries = [
        {"index": i, "seed": s.seed, "label": s.label, "split": splits[i],
         "image": f"images/{i:05d}.pgm", "scene": s.scene.to_dict()}
        for i, s in enumerate(samples)
    ]
    body = {"generator": generator.config.to_dict(), "samples": entries}
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    return {**body, "sha256": digest}


def load_split(manifest_dict: dict, split: str, generator: Generator):
    """Scenes, exactly re-rendered images and labels for one split."""
    rows = [e for e in manifest_dict["samples"] if e["split"] == split]
    scenes = [BlobScene.from_dict(e["scene"]) for e in rows]
    labels = np.array([e["label"] for e in rows], dtype=int)
    if not scenes:
        return scenes, torch.zeros(0, generator.resolution, generator.resolution), labels
    # one scene at a time: batched rendering differs from the original
    # single-scene render in the last bits
    with torch.no_grad():
        images = torch.stack([generator.render(s.tensor()) for s in scenes])
    return scenes, images, labels
