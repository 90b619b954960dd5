"""Optimizer, gradient checking, eigensolver and RNG shared by all modules.

Everything here runs in float64. Arrays may be numpy arrays or torch
tensors; Adam and the gradient checker work on torch tensors so they can
sit directly behind autograd.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

DTYPE = torch.float64


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; numpy guarantees this stream across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: torch.Tensor | None = None
    v: torch.Tensor | None = None
    t: int = 0

    def reset(self) -> None:
        self.m = None
        self.v = None
        self.t = 0


def adam_step(
    params: torch.Tensor,
    grads: torch.Tensor,
    state: AdamState,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """One bias-corrected Adam update; returns new params, advances ``state``.

    Coordinates where ``mask`` is False keep their exact input values.
    """
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {tuple(params.shape)} vs grads {tuple(grads.shape)}")
    finite = torch.isfinite(grads)
    if not bool(finite.all()):
        bad = int(torch.nonzero(~finite.reshape(-1))[0])
        raise FloatingPointError(f"non-finite gradient at flat index {bad}")
    if state.m is None:
        state.m = torch.zeros_like(params)
        state.v = torch.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {tuple(params.shape)} vs state {tuple(state.m.shape)}")
    if mask is not None:
        grads = torch.where(mask, grads, torch.zeros_like(grads))

    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    new = params - state.lr * m_hat / (torch.sqrt(v_hat) + state.eps)
    if mask is not None:
        new = torch.where(mask, new, params)
    return new


def value_and_grad(loss: Callable[[torch.Tensor], torch.Tensor], point: torch.Tensor):
    x = point.detach().clone().requires_grad_(True)
    value = loss(x)
    (grad,) = torch.autograd.grad(value, x)
    return float(value.detach()), grad.detach()


def finite_diff_check(
    loss: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    h: float = 1e-4,
    grad: torch.Tensor | None = None,
    coords: torch.Tensor | None = None,
) -> float:
    """Max over coordinates of |g - g_fd| / max(1, |g_fd|) with central differences.

    ``grad`` defaults to the autograd gradient of ``loss`` at ``point``.
    ``coords`` optionally restricts the probed flat indices.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    point = point.detach().to(DTYPE)
    if grad is None:
        _, grad = value_and_grad(loss, point)
    grad = grad.reshape(-1)
    flat = point.reshape(-1)
    idx = range(flat.numel()) if coords is None else [int(i) for i in coords]
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            plus = flat.clone()
            plus[i] += h
            minus = flat.clone()
            minus[i] -= h
            lp = float(loss(plus.reshape(point.shape)))
            lm = float(loss(minus.reshape(point.shape)))
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"loss not finite when probing coordinate {i}")
            g_fd = (lp - lm) / (2.0 * h)
            err = abs(float(grad[i]) - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst


def sym_eig(
    matrix, sym_tol: float = 1e-10, max_sweeps: int = 100
) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigendecomposition of a small symmetric matrix.

    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    as columns, so that ``A @ Q == Q @ diag(w)``.
    """
    a = np.array(matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > 64:
        raise ValueError(f"dimension {n} exceeds the supported maximum of 64")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    asym = np.max(np.abs(a - a.T)) if n else 0.0
    if asym > sym_tol:
        raise ValueError(f"matrix not symmetric (max |A - A^T| = {asym:.3e})")
    a = 0.5 * (a + a.T)
    q = np.eye(n)
    scale = max(np.max(np.abs(a)) if n else 0.0, np.finfo(float).tiny)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for r in range(p + 1, n):
                apr = a[p, r]
                if abs(apr) <= 1e-300:
                    continue
                tau = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap = a[:, p].copy()
                ar = a[:, r].copy()
                a[:, p] = c * ap - s * ar
                a[:, r] = s * ap + c * ar
                ap = a[p, :].copy()
                ar = a[r, :].copy()
                a[p, :] = c * ap - s * ar
                a[r, :] = s * ap + c * ar
                qp = q[:, p].copy()
                qr = q[:, r].copy()
                q[:, p] = c * qp - s * qr
                q[:, r] = s * qp + c * qr
    else:
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off > 1e-12 * scale:
            raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps (off-diagonal {off:.3e})")

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], q[:, order]
