"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

import numpy as np
import torch


def numeric_grad(fn, x: torch.Tensor, h: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (perturbed in place).

    ``indices`` restricts the check to a subset of flat positions.
    """
    flat = x.data.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    out = np.zeros(len(idx))
    with torch.no_grad():
        for k, i in enumerate(idx):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            out[k] = (up - down) / (2 * h)
    return out


def analytic_grad(fn, x: torch.Tensor, indices=None) -> np.ndarray:
    if x.grad is not None:
        x.grad = None
    with torch.enable_grad():
        fn().backward()
    g = x.grad.detach().reshape(-1).numpy().copy()
    x.grad = None
    return g if indices is None else g[list(indices)]


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||), with a floor for all-zero gradients."""
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(num / den)


def check(fn, tensors, h: float = 1e-6, max_entries: int | None = None, rng=None,
          per_tensor: bool = True) -> float:
    """Worst relative error between analytic and numeric gradients over ``tensors``.

    With ``per_tensor=False`` the checked entries of all tensors are stacked
    into one gradient vector first. That reading is needed when some tensor
    has an identically zero gradient (a conv bias feeding batch norm), where
    a per-tensor ratio only measures finite-difference noise.
    """
    rng = rng or np.random.default_rng(0)
    pairs = []
    for t in tensors:
        n = t.numel()
        idx = None
        if max_entries is not None and n > max_entries:
            idx = sorted(rng.choice(n, max_entries, replace=False).tolist())
        pairs.append((analytic_grad(fn, t, idx), numeric_grad(fn, t, h, idx)))
    if not per_tensor:
        return relative_error(np.concatenate([a for a, _ in pairs]),
                              np.concatenate([b for _, b in pairs]))
    return max(relative_error(a, b) for a, b in pairs)
