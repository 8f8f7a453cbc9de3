"""Finite-difference verification of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .model import ModelConfig, ModelParams, init_params, loss_and_grad

TINY = ModelConfig(d=16, enc_layers=1, dec_layers=1, heads=2, mlp_ratio=2, k=8, n_c=8, m=0.4,
                   embed_hidden=16)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: Dict[str, float]
    checked: int


def rel_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries meaningful."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tiny_batch(cfg: ModelConfig, seed, batch: int = 2):
    """Random patches, centers and masks for a gradient check."""
    from ..patching import mask_count

    rng = np.random.default_rng(seed)
    local = rng.normal(scale=0.1, size=(batch, cfg.n_c, cfg.k, 3))
    local[:, :, 0, :] = 0.0  # the center sits in its own patch
    centers = rng.uniform(-1.0, 1.0, size=(batch, cfg.n_c, 3))
    n_m = mask_count(cfg.n_c, cfg.m)
    masked = np.zeros((batch, cfg.n_c), dtype=bool)
    for b in range(batch):
        masked[b, rng.choice(cfg.n_c, n_m, replace=False)] = True
    return local, centers, masked


def grad_check(cfg: ModelConfig = TINY, seed=0, h: float = 1e-4,
               max_entries: Optional[int] = 48, params: Optional[ModelParams] = None,
               batch=None) -> GradCheckReport:
    """Compare analytic gradients with central differences on the float64 path.

    Every tensor is checked; at most ``max_entries`` randomly chosen entries
    per tensor (all entries when None). The weights are drawn with std 0.3
    instead of the training init so every path carries signal.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(cfg, seed, dtype=np.float64)
        for name, t in params.tensors.items():
            t += rng.normal(scale=0.3, size=t.shape)
    params = params.astype(np.float64)
    local, centers, masked = batch if batch is not None else tiny_batch(cfg, seed + 1)
    _, grads = loss_and_grad(params, local, centers, masked)
    per_tensor, checked = {}, 0
    for name, t in params.tensors.items():
        flat = t.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            picks = np.arange(flat.size)
        else:
            picks = rng.choice(flat.size, max_entries, replace=False)
        worst = 0.0
        for i in picks:
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_and_grad(params, local, centers, masked)
            flat[i] = old - h
            lm, _ = loss_and_grad(params, local, centers, masked)
            flat[i] = old
            numeric = (lp - lm) / (2.0 * h)
            worst = max(worst, rel_error(float(grads[name].reshape(-1)[i]), numeric))
        per_tensor[name] = worst
        checked += len(picks)
    return GradCheckReport(max(per_tensor.values()), per_tensor, checked)
