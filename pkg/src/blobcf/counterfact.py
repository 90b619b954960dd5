"""Latent inversion, blob ranking, neighbourhoods and restricted counterfactuals.

All optimisation loops are batched: a ``(B, D)`` stack of scenes is
optimised at once with per-coordinate Adam, and each row keeps its own
best iterate. A single query is simply a batch of one.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .blobgen import BLUR_RADIUS, N_SPATIAL, BlobScene, Generator, blob_slices, mahalanobis_sq, pixel_centers
from .classifier import ClassifierModel
from .numerics import AdamState, adam_step

R_HALF = math.sqrt(2.0 * math.log(2.0))
# prior range widths of cx, cy, log_s, log_a, theta, p
SPATIAL_RANGES = (0.6, 0.6, math.log(0.4 / 0.05), 1.0, 2.0 * math.pi, 3.0)


@dataclass
class HyperParams:
    lpips: float = 1.0
    latent: float = 0.1
    decision: float = 0.1
    inv_lpips: float = 1.0
    inv_pixel: float = 1.0
    inv_decision: float = 0.1
    inv_anchor: float = 0.1
    cf: float = 1.0
    prox_img: float = 1.0
    prox_lat: float = 0.1
    t_inv: int = 300
    t_probe: int = 150
    t_cf: int = 300
    lr_latent: float = 0.01
    r_half: float = R_HALF
    spatial_ranges: tuple = SPATIAL_RANGES

    def __post_init__(self):
        self.spatial_ranges = tuple(float(v) for v in self.spatial_ranges)
        for name in ("lpips", "latent", "decision", "inv_lpips", "inv_pixel", "inv_decision",
                     "inv_anchor", "cf", "prox_img", "prox_lat", "lr_latent", "r_half"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("t_inv", "t_probe", "t_cf"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if len(self.spatial_ranges) != N_SPATIAL or min(self.spatial_ranges) <= 0:
            raise ValueError("spatial_ranges needs six positive widths")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spatial_ranges"] = list(self.spatial_ranges)
        return d


@dataclass
class Models:
    generator: Generator
    classifier: ClassifierModel
    encoder: object  # anything with encode_batch(images) -> (B, D)


@dataclass
class PhaseOutput:
    scenes: torch.Tensor  # (B, D) selected iterates
    images: torch.Tensor  # (B, H, W)
    traces: dict  # term -> (steps + 1, B) array
    best_step: np.ndarray
    seconds: float


def _check_finite(total: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(total).all()):
        raise FloatingPointError(f"non-finite {what} objective")


def _run(h0, objective, steps, lr, mask=None, accept=None, what="objective") -> PhaseOutput:
    """Masked Adam from ``h0``; keeps the best iterate per row.

    ``objective(h)`` returns (total (B,), terms dict, image (B,H,W), aux).
    ``accept(aux)`` marks rows whose iterate is admissible as a success;
    admissible iterates take priority over the plain best objective.
    """
    t0 = time.perf_counter()
    h0 = h0.detach()
    B = h0.shape[0]
    state = AdamState(lr=lr)
    h = h0.clone()
    traces: dict[str, list] = {}
    best_any = torch.full((B,), math.inf)
    best_ok = torch.full((B,), math.inf)
    scene_any = h0.clone()
    scene_ok = h0.clone()
    step_any = np.zeros(B, dtype=int)
    step_ok = np.full(B, -1)
    img_any = img_ok = None
    for step in range(steps + 1):
        x = h.clone().requires_grad_(True)
        total, terms, image, aux = objective(x)
        _check_finite(total, what)
        for name, val in terms.items():
            traces.setdefault(name, []).append(val.detach().numpy().copy())
        traces.setdefault("total", []).append(total.detach().numpy().copy())
        tot = total.detach()
        image = image.detach()
        if img_any is None:
            img_any = image.clone()
            img_ok = image.clone()
        better = tot < best_any
        best_any = torch.where(better, tot, best_any)
        scene_any[better] = h[better]
        img_any[better] = image[better]
        step_any[better.numpy()] = step
        if accept is not None:
            ok = accept(aux) & (tot < best_ok)
            best_ok = torch.where(ok, tot, best_ok)
            scene_ok[ok] = h[ok]
            img_ok[ok] = image[ok]
            step_ok[ok.numpy()] = step
        if step == steps:
            break
        (grad,) = torch.autograd.grad(total.sum(), x)
        h = adam_step(h, grad, state, mask)
    if accept is not None:
        has_ok = torch.from_numpy(step_ok >= 0)
        scenes = torch.where(has_ok[:, None], scene_ok, scene_any)
        images = torch.where(has_ok[:, None, None], img_ok, img_any)
        best_step = np.where(step_ok >= 0, step_ok, step_any)
    else:
        scenes, images, best_step = scene_any, img_any, step_any
    if mask is not None:
        scenes = torch.where(mask, scenes, h0)
    return PhaseOutput(scenes, images, {k: np.stack(v) for k, v in traces.items()},
                       best_step, time.perf_counter() - t0)


def _as_batch(x) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float64)
    return x.unsqueeze(0) if x.dim() == 2 else x


def inversion_objective(x_q, h_init, models: Models, hp: HyperParams):
    """Closure over the four-term inversion loss for a query batch."""
    x_q = _as_batch(x_q)
    perceptor = models.classifier.perceptor
    with torch.no_grad():
        fq = perceptor.extract(x_q)
    h_init = h_init.detach()

    def objective(h):
        img = models.generator.render(h)
        fr = perceptor.extract(img)
        terms = {
            "perceptual": perceptor.perceptual_distance(fr, fq),
            "pixel": ((img - x_q) ** 2).mean(dim=(1, 2)),
            "decision": ((fr.pooled - fq.pooled) ** 2).mean(dim=1),
            "anchor": ((h - h_init) ** 2).mean(dim=1),
        }
        total = (hp.inv_lpips * terms["perceptual"] + hp.inv_pixel * terms["pixel"]
                 + hp.inv_decision * terms["decision"] + hp.inv_anchor * terms["anchor"])
        return total, terms, img, None

    return objective


def counterfactual_objective(x_q, scene0, target, models: Models, hp: HyperParams):
    """Closure: target-class BCE plus image and latent proximity to the query."""
    x_q = _as_batch(x_q)
    perceptor = models.classifier.perceptor
    with torch.no_grad():
        fq = perceptor.extract(x_q)
    scene0 = scene0.detach()
    target = torch.as_tensor(target, dtype=torch.float64).reshape(-1).expand(x_q.shape[0])

    def objective(h):
        img = models.generator.render(h)
        fr = perceptor.extract(img)
        logit = models.classifier.logit_from_pooled(fr.pooled)
        terms = {
            "bce": F.binary_cross_entropy_with_logits(logit, target, reduction="none"),
            "perceptual": perceptor.perceptual_distance(fr, fq),
            "pixel": ((img - x_q) ** 2).mean(dim=(1, 2)),
            "latent": ((h - scene0) ** 2).mean(dim=1),
        }
        total = (hp.cf * terms["bce"] + hp.prox_img * (terms["perceptual"] + terms["pixel"])
                 + hp.prox_lat * terms["latent"])
        terms["prob"] = torch.sigmoid(logit).detach()
        return total, terms, img, logit.detach()

    return objective, (lambda logit: (logit > 0).to(torch.float64) == target)


def invert(x_q, models: Models, hp: HyperParams, init=None) -> PhaseOutput:
    """Invert a query batch from the encoder's estimate (or ``init``)."""
    x_q = _as_batch(x_q)
    if x_q.shape[-1] != models.generator.resolution:
        raise ValueError("query resolution does not match the generator")
    if not models.classifier.frozen:
        raise RuntimeError("classifier must be frozen")
    h_init = models.encoder.encode_batch(x_q) if init is None else _as_batch_scene(init)
    return _run(h_init, inversion_objective(x_q, h_init, models, hp), hp.t_inv, hp.lr_latent,
                what="inversion")


def _as_batch_scene(h) -> torch.Tensor:
    if isinstance(h, BlobScene):
        h = h.tensor()
    h = torch.as_tensor(h, dtype=torch.float64)
    return h.unsqueeze(0) if h.dim() == 1 else h


def optimize_counterfactual(scene0, x_q, target, free_mask, models: Models, hp: HyperParams,
                            steps: int | None = None) -> PhaseOutput:
    """Masked counterfactual search; coordinates outside ``free_mask`` never move."""
    scene0 = _as_batch_scene(scene0)
    x_q = _as_batch(x_q)
    mask = torch.as_tensor(free_mask, dtype=torch.bool)
    if mask.dim() == 1:
        mask = mask.unsqueeze(0).expand_as(scene0)
    if mask.shape != scene0.shape:
        raise ValueError("free_mask shape does not match the scenes")
    steps = hp.t_cf if steps is None else steps
    objective, accept = counterfactual_objective(x_q, scene0, target, models, hp)
    return _run(scene0, objective, steps, hp.lr_latent, mask=mask, accept=accept, what="counterfactual")


def rank_blobs(scene_before, scene_after, K: int, d_s: int, hp: HyperParams) -> list[tuple[int, float]]:
    """Blobs by descending range-normalised spatial change; ties go to the lower index."""
    a = np.asarray(scene_before, dtype=np.float64).reshape(-1)
    b = np.asarray(scene_after, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.shape[0] != K * (N_SPATIAL + d_s) + d_s:
        raise ValueError("scene shapes do not match (K, d_s)")
    width = N_SPATIAL + d_s
    delta = (b[: K * width] - a[: K * width]).reshape(K, width)[:, :N_SPATIAL]
    scores = np.sqrt(((delta / np.array(hp.spatial_ranges)) ** 2).sum(axis=1))
    order = sorted(range(K), key=lambda k: (-scores[k], k))
    return [(k, float(scores[k])) for k in order]


def half_peak_masks(scene: BlobScene, resolution: int, r_half: float = R_HALF) -> np.ndarray:
    """``(K, H, W)`` boolean masks of pixels within Mahalanobis radius ``r_half``."""
    u = pixel_centers(resolution)
    return np.stack([mahalanobis_sq(scene.spatial[k], u) <= r_half**2 for k in range(scene.K)])


def blob_neighborhood(scene: BlobScene, k_star: int, resolution: int, hp: HyperParams) -> list[int]:
    """Indices whose half-peak pixel regions intersect that of ``k_star`` (always contains it)."""
    if not 0 <= k_star < scene.K:
        raise IndexError(f"k_star {k_star} out of range for K={scene.K}")
    masks = half_peak_masks(scene, resolution, hp.r_half)
    ref = masks[k_star]
    return sorted({k_star} | {j for j in range(scene.K) if (masks[j] & ref).any()})


def blob_mask(K: int, d_s: int, blobs) -> np.ndarray:
    """Flat free-parameter mask covering spatial and style entries of ``blobs``."""
    mask = np.zeros(K * (N_SPATIAL + d_s) + d_s, dtype=bool)
    for k in blobs:
        mask[blob_slices(K, d_s, k)] = True
    return mask


def roi_outside(scenes, blobs, resolution: int, r_half: float = R_HALF,
                margin_px: float = BLUR_RADIUS) -> np.ndarray:
    """Pixels farther than ``margin_px`` from every half-peak region of ``blobs`` in ``scenes``."""
    union = np.zeros((resolution, resolution), dtype=bool)
    for scene in scenes:
        masks = half_peak_masks(scene, resolution, r_half)
        for k in blobs:
            union |= masks[k]
    if not union.any():
        return np.ones_like(union)
    return ndimage.distance_transform_edt(~union) > margin_px


@dataclass
class CounterfactualResult:
    query: np.ndarray
    target: int
    mode: str
    inversion_scene: BlobScene
    reconstruction: np.ndarray
    counterfactual_scene: BlobScene
    counterfactual: np.ndarray
    k_star: int | None
    neighborhood: list
    free_mask: np.ndarray
    traces: dict
    prob_query: float
    prob_reconstruction: float
    prob_counterfactual: float
    success: bool
    probe_scene: BlobScene | None = None
    ranking: list = field(default_factory=list)
    seconds: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "mode": self.mode,
            "target": self.target,
            "success": bool(self.success),
            "k_star": self.k_star,
            "neighborhood": [int(k) for k in self.neighborhood],
            "ranking": [[int(k), float(s)] for k, s in self.ranking],
            "free_mask": [int(v) for v in self.free_mask],
            "prob_query": self.prob_query,
            "prob_reconstruction": self.prob_reconstruction,
            "prob_counterfactual": self.prob_counterfactual,
            "inversion_scene": self.inversion_scene.to_dict(),
            "probe_scene": None if self.probe_scene is None else self.probe_scene.to_dict(),
            "counterfactual_scene": self.counterfactual_scene.to_dict(),
            "traces": {phase: {term: [float(v) for v in vals] for term, vals in terms.items()}
                       for phase, terms in self.traces.items()},
        }
        if include_timing:
            d["seconds"] = self.seconds
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=1)


MODES = ("tace", "unrestricted")


def _probability(models: Models, images: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        prob, _, _ = models.classifier.forward(images)
    return prob.numpy()


def explain_batch(x_q, targets, mode: str, models: Models, hp: HyperParams,
                  inversion: PhaseOutput | None = None) -> list[CounterfactualResult]:
    """Counterfactuals for a query batch; ``inversion`` may be shared across modes."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    x_q = _as_batch(x_q)
    B = x_q.shape[0]
    targets = np.broadcast_to(np.asarray(targets, dtype=int), (B,)).copy()
    if not np.isin(targets, (0, 1)).all():
        raise ValueError("targets must be 0 or 1")
    g = models.generator
    K, d_s, D = g.K, g.d_s, g.scene_dim
    if inversion is None:
        inversion = invert(x_q, models, hp)
    h_inv = inversion.scenes
    target_t = torch.from_numpy(targets.astype(np.float64))
    all_free = torch.ones(B, D, dtype=torch.bool)

    probe = None
    rankings = [[] for _ in range(B)]
    k_stars: list = [None] * B
    hoods: list = [list(range(K))] * B
    if mode == "tace":
        probe = optimize_counterfactual(h_inv, x_q, target_t, all_free, models, hp, steps=hp.t_probe)
        masks = []
        hoods = []
        for i in range(B):
            rankings[i] = rank_blobs(h_inv[i].numpy(), probe.scenes[i].numpy(), K, d_s, hp)
            k_stars[i] = rankings[i][0][0]
            scene_i = BlobScene.unflatten(h_inv[i].numpy(), K, d_s)
            hoods.append(blob_neighborhood(scene_i, k_stars[i], g.resolution, hp))
            masks.append(blob_mask(K, d_s, hoods[i]))
        free = torch.from_numpy(np.stack(masks))
        final = optimize_counterfactual(h_inv, x_q, target_t, free, models, hp, steps=hp.t_cf)
    else:
        free = all_free
        final = optimize_counterfactual(h_inv, x_q, target_t, free, models, hp,
                                        steps=hp.t_probe + hp.t_cf)

    p_q = _probability(models, x_q)
    p_rec = _probability(models, inversion.images)
    p_cf = _probability(models, final.images)
    results = []
    for i in range(B):
        traces = {"inversion": {k: v[:, i] for k, v in inversion.traces.items()}}
        if probe is not None:
            traces["probe"] = {k: v[:, i] for k, v in probe.traces.items()}
        traces["counterfactual"] = {k: v[:, i] for k, v in final.traces.items()}
        seconds = {"inversion": inversion.seconds / B, "counterfactual": final.seconds / B}
        if probe is not None:
            seconds["probe"] = probe.seconds / B
        seconds["batch_size"] = B
        results.append(CounterfactualResult(
            query=x_q[i].numpy(),
            target=int(targets[i]),
            mode=mode,
            inversion_scene=BlobScene.unflatten(h_inv[i].numpy(), K, d_s),
            reconstruction=inversion.images[i].numpy(),
            counterfactual_scene=BlobScene.unflatten(final.scenes[i].numpy(), K, d_s),
            counterfactual=final.images[i].numpy(),
            k_star=k_stars[i],
            neighborhood=hoods[i],
            free_mask=free[i].numpy().copy(),
            traces=traces,
            prob_query=float(p_q[i]),
            prob_reconstruction=float(p_rec[i]),
            prob_counterfactual=float(p_cf[i]),
            success=bool(int(p_cf[i] > 0.5) == targets[i]),
            probe_scene=None if probe is None else BlobScene.unflatten(probe.scenes[i].numpy(), K, d_s),
            ranking=rankings[i],
            seconds=seconds,
        ))
    return results


def explain(x_q, target: int, mode: str, models: Models, hp: HyperParams) -> CounterfactualResult:
    return explain_batch(_as_batch(x_q), [target], mode, models, hp)[0]
