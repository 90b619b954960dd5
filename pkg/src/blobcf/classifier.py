"""The decision model to be explained: a logistic head on pooled features."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .numerics import AdamState, adam_step, sym_eig
from .perceptor import Perceptor

log = logging.getLogger(__name__)


@dataclass
class ClassifierModel:
    weight: np.ndarray
    bias: float = 0.0
    perceptor_seed: int = 1234
    resolution: int = 64
    frozen: bool = False
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        self._perceptor = Perceptor(self.resolution, self.perceptor_seed)

    @property
    def perceptor(self) -> Perceptor:
        return self._perceptor

    def freeze(self) -> "ClassifierModel":
        self.frozen = True
        self._w = torch.from_numpy(self.weight.copy())
        return self

    def logit_from_pooled(self, pooled: torch.Tensor) -> torch.Tensor:
        if not self.frozen:
            raise RuntimeError("classifier must be frozen before use")
        return pooled @ self._w + self.bias

    def forward(self, images: torch.Tensor):
        """Batched (probability, logit, decision features) for ``(B, H, W)`` images."""
        pooled = self.perceptor.pooled(images)
        logit = self.logit_from_pooled(pooled)
        return torch.sigmoid(logit), logit, pooled

    def to_dict(self) -> dict:
        return {
            "weight": [float(v) for v in self.weight],
            "bias": float(self.bias),
            "perceptor_seed": self.perceptor_seed,
            "resolution": self.resolution,
            "report": self.report,
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ClassifierModel":
        with open(path) as fh:
            d = json.load(fh)
        return cls(**d).freeze()


def classify(model: ClassifierModel, image):
    """Single image -> (probability of class 1, logit, 24-dim decision features)."""
    prob, logit, feats = model.forward(torch.as_tensor(image))
    return float(prob[0]), float(logit[0]), feats[0]


def predict(model: ClassifierModel, images) -> np.ndarray:
    with torch.no_grad():
        prob, _, _ = model.forward(images)
    return (prob > 0.5).numpy().astype(int)


def _bce(logit, y):
    return F.binary_cross_entropy_with_logits(logit, y)


def fit_logistic(
    x_tr,
    y_tr,
    x_va,
    y_va,
    rng: np.random.Generator,
    lr: float = 0.001,
    max_epochs: int = 1000,
    batch_size: int = 32,
    plateau_patience: int = 5,
    plateau_factor: float = 0.5,
    stop_patience: int = 10,
    eig_floor: float = 1e-4,
):
    """Logistic regression on feature rows; returns (weight, bias, info).

    Mean BCE with Adam, lr multiplied by ``plateau_factor`` after
    ``plateau_patience`` epochs without a new best val loss, early stop after
    ``stop_patience``. Training runs in whitened coordinates (PCA of the train
    features, eigenvalues floored at ``eig_floor`` times the largest) because the
    pooled means are strongly correlated; the transform is folded back, so the
    result acts on raw features.
    """
    x_tr = torch.as_tensor(x_tr, dtype=torch.float64)
    x_va = torch.as_tensor(x_va, dtype=torch.float64)
    y_tr = torch.as_tensor(np.asarray(y_tr), dtype=torch.float64)
    y_va = torch.as_tensor(np.asarray(y_va), dtype=torch.float64)
    for y in (y_tr, y_va):
        if not bool(((y == 0) | (y == 1)).all()):
            raise ValueError("labels must be 0 or 1")
    if len(torch.unique(y_tr)) < 2:
        raise ValueError("training set must contain both classes")
    if not (bool(torch.isfinite(x_tr).all()) and bool(torch.isfinite(x_va).all())):
        raise FloatingPointError("non-finite features; the training loss would not be finite")
    mu = x_tr.mean(0)
    centred = (x_tr - mu).numpy()
    lam, vecs = sym_eig(centred.T @ centred / max(len(centred) - 1, 1))
    lam = np.maximum(lam, eig_floor * max(float(lam.max()), 1e-300))
    whiten = torch.from_numpy(vecs / np.sqrt(lam))
    z_tr = (x_tr - mu) @ whiten
    z_va = (x_va - mu) @ whiten

    params = torch.zeros(z_tr.shape[1] + 1)
    state = AdamState(lr=lr)
    n = z_tr.shape[0]
    best = (float("inf"), params.clone(), 0)
    since_best = 0
    since_plateau_best = 0
    plateau_best = float("inf")
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start:start + batch_size])
            p = params.clone().requires_grad_(True)
            loss = _bce(z_tr[idx] @ p[:-1] + p[-1], y_tr[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            (g,) = torch.autograd.grad(loss, p)
            params = adam_step(params, g, state)
        with torch.no_grad():
            val_loss = float(_bce(z_va @ params[:-1] + params[-1], y_va))
        if not np.isfinite(val_loss):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        if val_loss < best[0] - 1e-12:
            best = (val_loss, params.clone(), epoch)
            since_best = 0
        else:
            since_best += 1
        if val_loss < plateau_best - 1e-12:
            plateau_best = val_loss
            since_plateau_best = 0
        else:
            since_plateau_best += 1
            if since_plateau_best >= plateau_patience:
                state.lr *= plateau_factor
                since_plateau_best = 0
        if since_best >= stop_patience:
            break

    params = best[1]
    w_t = whiten @ params[:-1]
    w = w_t.numpy()
    b = float(params[-1] - (w_t * mu).sum())
    info = {"best_val_loss": best[0], "best_epoch": best[2], "epochs_run": epoch, "final_lr": state.lr}
    return w, b, info


def train_classifier(
    train_images,
    train_labels,
    val_images,
    val_labels,
    rng: np.random.Generator,
    perceptor: Perceptor | None = None,
    **fit_kwargs,
) -> ClassifierModel:
    """Fit the head on pooled perceptor features; returns a frozen model with a report."""
    if perceptor is None:
        res = int(torch.as_tensor(train_images).shape[-1])
        perceptor = Perceptor(res)
    with torch.no_grad():
        x_tr = _pooled_batches(perceptor, train_images)
        x_va = _pooled_batches(perceptor, val_images)
    w, b, info = fit_logistic(x_tr, train_labels, x_va, val_labels, rng, **fit_kwargs)
    model = ClassifierModel(w, b, perceptor.seed, perceptor.resolution).freeze()
    model.report = {
        "train_accuracy": float(np.mean(predict(model, train_images) == np.asarray(train_labels))),
        "val_accuracy": float(np.mean(predict(model, val_images) == np.asarray(val_labels))),
        **info,
    }
    log.info("classifier: %s", model.report)
    return model


def _pooled_batches(perceptor: Perceptor, images, chunk: int = 256) -> torch.Tensor:
    images = torch.as_tensor(images, dtype=torch.float64)
    return torch.cat([perceptor.pooled(images[i:i + chunk]) for i in range(0, images.shape[0], chunk)])
