"""Success rate and the Frechet distance between Gaussian feature fits.

The feature space is the 24-dim pooled perceptor output, so the Frechet
number is an FID-proxy and is labelled as such in every report.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import sym_eig

log = logging.getLogger(__name__)

CLAMP_WARN = -1e-10


@dataclass
class GaussStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean length {d}")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-10:
            raise ValueError("covariance is not symmetric")
        if self.n < 2:
            raise ValueError("need at least two samples")

    @classmethod
    def from_features(cls, feats) -> "GaussStats":
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError("need an (n >= 2, d) feature array")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(axis=0), 0.5 * (cov + cov.T), x.shape[0])


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    w, q = sym_eig(a)
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


def frechet_distance(a: GaussStats, b: GaussStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.mean.shape != b.mean.shape:
        raise ValueError("dimension mismatch")
    root_a = _psd_sqrt(a.cov)
    middle = root_a @ b.cov @ root_a
    middle = 0.5 * (middle + middle.T)
    w, _ = sym_eig(middle, sym_tol=1e-8)
    if w.size and w.min() < CLAMP_WARN * max(1.0, abs(w).max()):
        log.warning("clamping negative eigenvalue %.3e in Frechet square root", w.min())
    trace_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    return max(value, 0.0)


def success_rate(flags) -> float:
    """Fraction of successful counterfactuals; accepts flags or results."""
    flags = [bool(getattr(f, "success", f)) for f in flags]
    if not flags:
        raise ValueError("success rate of an empty list")
    return sum(flags) / len(flags)
