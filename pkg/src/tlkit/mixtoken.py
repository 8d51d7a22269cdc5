"""MixToken: CutMix-style rectangular masks applied on the token grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ShapeError


@dataclass(frozen=True)
class MixMask:
    """Binary ``side x side`` mask; 1 marks tokens taken from the first sample."""

    mask: np.ndarray
    mean: float
    lambda_drawn: float
    box: tuple  # (row0, col0, row1, col1) of the zero region after clipping

    @property
    def grid_side(self):
        return self.mask.shape[0]

    @property
    def flat(self):
        return self.mask.reshape(-1)


def mask_from_box(grid_side, lam, center_row, center_col):
    """Deterministic part of the recipe: cut a ``floor(side*sqrt(1-lam))`` square."""
    cut = int(math.floor(grid_side * math.sqrt(1.0 - lam)))
    r0 = min(max(center_row - cut // 2, 0), grid_side)
    c0 = min(max(center_col - cut // 2, 0), grid_side)
    r1 = min(max(center_row - cut // 2 + cut, 0), grid_side)
    c1 = min(max(center_col - cut // 2 + cut, 0), grid_side)
    mask = np.ones((grid_side, grid_side), dtype=np.float64)
    mask[r0:r1, c0:c1] = 0.0
    return MixMask(mask, float(mask.mean()), float(lam), (r0, c0, r1, c1))


def sample_mask(grid_side, rng):
    """Draw ``lam ~ U(0, 1)`` and a uniform centre, then build the clipped mask."""
    if grid_side < 1:
        raise ShapeError("grid_side must be >= 1")
    lam = rng.uniform()
    row = int(rng.integers(grid_side))
    col = int(rng.integers(grid_side))
    return mask_from_box(grid_side, lam, row, col)


def _flat_mask(mask, n):
    m = mask.flat if isinstance(mask, MixMask) else np.asarray(mask, dtype=np.float64).reshape(-1)
    if m.size != n:
        raise ShapeError(f"mask has {m.size} cells but there are {n} tokens")
    return m


def mix_tokens(t1, t2, mask):
    """``T1*M + T2*(1-M)`` for (N, D) arrays; M broadcasts over D."""
    t1, t2 = np.asarray(t1), np.asarray(t2)
    if t1.shape != t2.shape or t1.ndim != 2:
        raise ShapeError(f"token shapes differ or are not (N, D): {t1.shape} vs {t2.shape}")
    m = _flat_mask(mask, t1.shape[0]).astype(bool)[:, None]
    return np.where(m, t1, t2)


def mix_token_labels(y1, y2, mask):
    """Same selection as :func:`mix_tokens`, on (N, K) label matrices."""
    return mix_tokens(y1, y2, mask)


def mix_class_label(y1, y2, mask):
    """``mean(M) * y1 + (1 - mean(M)) * y2`` using the clipped mask's mean."""
    mbar = mask.mean if isinstance(mask, MixMask) else float(np.mean(mask))
    return mbar * np.asarray(y1, dtype=np.float64) + (1.0 - mbar) * np.asarray(y2, dtype=np.float64)


def mix_tokens_batch(tokens, partner, mask):
    """Differentiable batch MixToken: sample b keeps its tokens where the flat
    (N,) mask is 1 and takes sample ``partner[b]``'s tokens elsewhere."""
    tokens = ag.as_tensor(tokens)
    m = _flat_mask(mask, tokens.shape[1]).astype(tokens.dtype)[None, :, None]
    other = ag.take(tokens, np.asarray(partner), axis=0)
    return ag.add(ag.mul(tokens, m), ag.mul(other, 1.0 - m))


def mix_labels_batch(token_labels, cls_labels, partner, mask):
    """Batch version of token- and class-label mixing for (B, N, K) and (B, K)."""
    m = _flat_mask(mask, token_labels.shape[1])
    mbar = mask.mean if isinstance(mask, MixMask) else float(m.mean())
    sel = m.astype(bool)[None, :, None]
    tok = np.where(sel, token_labels, token_labels[partner])
    cls = mbar * cls_labels + (1.0 - mbar) * cls_labels[partner]
    return tok, cls
