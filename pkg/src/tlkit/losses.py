"""Soft-label cross-entropy, the classification loss, the dense token-labeling
loss and their weighted sum, plus token-participation subsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError, LabelError, UsageError

DEFAULT_BETA = 0.5


@dataclass
class TokenLabelMap:
    token_labels: np.ndarray  # (N, K)
    cls_label: np.ndarray  # (K,)

    def validate(self, tol=1e-6):
        for name, arr in (("token_labels", self.token_labels), ("cls_label", self.cls_label)):
            arr = np.asarray(arr)
            if (arr < 0).any():
                raise LabelError(f"{name} has negative entries")
            if np.abs(arr.sum(axis=-1) - 1.0).max() > tol:
                raise LabelError(f"{name} rows do not sum to 1")
        return self


@dataclass
class LossReport:
    l_cls: float
    l_tl: float
    l_total: float
    beta: float
    tokens_used: int
    # differentiable total; None when the report was built from plain arrays only
    graph: ag.Tensor | None = None


def _check_labels(labels, tol=1e-4):
    labels = np.asarray(labels)
    if (labels < 0).any():
        raise LabelError("labels must be non-negative")
    err = np.abs(labels.sum(axis=-1) - 1.0)
    if err.size and err.max() > tol:
        raise LabelError(f"labels are not normalized (max |sum - 1| = {err.max():.3g})")
    return labels


def cross_entropy_soft(logits, label):
    """``-Σ_k label_k log softmax(logits)_k``; works row-wise on (..., K) input.

    Returns a graph tensor (scalar for a single K-vector).
    """
    label = _check_labels(label)
    logits = ag.as_tensor(logits)
    if not np.isfinite(logits.data).all():
        raise LabelError("logits must be finite")
    return ag.soft_cross_entropy(logits, label)


def token_labeling_loss(token_logits, token_labels, participation=None):
    """Mean soft cross-entropy over participating tokens.

    ``token_logits``/``token_labels`` are (N, K) or batched (B, N, K); the same
    participation subset applies to every sample of a batch.
    """
    token_logits = ag.as_tensor(token_logits)
    n = token_logits.shape[-2]
    if participation is None:
        per_token = cross_entropy_soft(token_logits, token_labels)
    else:
        idx = np.asarray(participation, dtype=np.intp)
        if idx.size == 0:
            raise UsageError("participation set is empty")
        if idx.min() < 0 or idx.max() >= n:
            raise UsageError("participation index out of range")
        logits_sel = ag.take(token_logits, idx, axis=-2)
        labels_sel = np.take(np.asarray(token_labels), idx, axis=-2)
        per_token = cross_entropy_soft(logits_sel, labels_sel)
    return ag.mean(per_token)


def total_loss(cls_logits, token_logits, cls_labels, token_labels, beta=DEFAULT_BETA, participation=None):
    """Classification loss plus ``beta`` times the token-labeling loss.

    Batched inputs average the classification loss over the batch.  With
    ``beta == 0`` the token term is not evaluated at all, so the graph is the
    plain classification loss.
    """
    if beta < 0:
        raise ConfigError("beta must be non-negative", "beta")
    l_cls = ag.mean(cross_entropy_soft(cls_logits, cls_labels))
    n = ag.as_tensor(token_logits).shape[-2]
    used = n if participation is None else len(participation)
    if beta == 0:
        cls_val = float(l_cls)
        return LossReport(cls_val, 0.0, cls_val, 0.0, 0, graph=l_cls)
    l_tl = token_labeling_loss(token_logits, token_labels, participation)
    graph = ag.add(l_cls, ag.scale(l_tl, beta))
    cls_val, tl_val = float(l_cls), float(l_tl)
    return LossReport(cls_val, tl_val, cls_val + beta * tl_val, float(beta), used, graph=graph)


def participation_size(n_tokens, rate):
    # rounding guards against rate*n landing a hair above an integer
    return math.ceil(round(rate * n_tokens, 9))


def sample_participation(n_tokens, rate, rng):
    """Uniform subset (without replacement) of ``ceil(rate * n_tokens)`` token indices."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"participation rate must lie in (0, 1], got {rate}", "participation_rate")
    if rate == 1.0:
        return np.arange(n_tokens)
    size = participation_size(n_tokens, rate)
    if size < 1:
        raise ConfigError("participation rate selects no tokens", "participation_rate")
    return np.sort(rng.choice(n_tokens, size=size, replace=False))


def one_hot(labels, num_classes, dtype=np.float64):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (num_classes,), dtype=dtype)
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)
