"""AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError


def base_lr(batch_size, token_labeling=True):
    """Linear scaling rule: ``1e-3 * bs / 640`` with token labeling, ``/ 1024`` without."""
    return 1e-3 * batch_size / (640 if token_labeling else 1024)


def lr_at(config, epoch):
    """Learning rate at fractional ``epoch``: linear warmup from 0, then cosine to ``min_lr``."""
    peak = config.base_lr
    warm = config.warmup_epochs
    if warm > 0 and epoch < warm:
        return peak * epoch / warm
    span = config.epochs - warm
    if span <= 0:
        return peak
    progress = min(max((epoch - warm) / span, 0.0), 1.0)
    return config.min_lr + 0.5 * (peak - config.min_lr) * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adamw_step(params, grads, state, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8, decay=None):
    """Update ``params`` and ``state`` in place.

    ``decay`` optionally maps parameter names to whether weight decay applies
    (all parameters decay when omitted).
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if p.shape != g.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        if decay is None or decay.get(name, True):
            p *= p.dtype.type(1.0 - lr * weight_decay)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state


def decay_mask(params):
    """Weight decay on matrices and conv kernels only; not on biases, norms or embeddings."""
    return {k: (p.ndim >= 2 and k not in ("cls_token", "pos_embed")) for k, p in params.items()}


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(s)
    return total
