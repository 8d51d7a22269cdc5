"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .losses import one_hot, total_loss
from .mixtoken import sample_mask
from .vit import TokenMix, build_model, model_forward, to_tensors

REL_FLOOR = 1e-6


def relative_error(analytic, numeric, floor=REL_FLOOR):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps entries whose true gradient is exactly zero (e.g. the key
    bias, to which softmax is invariant) from dividing noise by noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, arr, eps=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    out = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return out


def check_function(fn, inputs, eps=1e-5, seed=0):
    """Check ``fn(*tensors) -> Tensor`` against finite differences.

    The output is reduced with a fixed random projection so non-scalar outputs
    are covered too.  Returns the worst relative error per input index.
    """
    from .autograd import Tensor, mul, sum_

    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = fn(*[Tensor(a) for a in arrays]).data
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar():
        return float((fn(*[Tensor(a) for a in arrays]).data * weights).sum())

    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    sum_(mul(fn(*leaves), weights)).backward()
    worst = []
    for leaf, arr in zip(leaves, arrays):
        num = numeric_grad(scalar, arr, eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        worst.append(float(relative_error(ana, num).max()))
    return worst


@dataclass
class GradcheckReport:
    worst: dict  # parameter name -> worst relative error
    seconds: float

    @property
    def max_error(self):
        return max(self.worst.values())

    def passed(self, tol):
        return self.max_error <= tol


def randomized_params(config, seed, spread=0.3):
    """Initial parameters pushed away from the zero/one init so every path carries gradient."""
    rng = np.random.default_rng([seed, 1])
    params = build_model(config, seed, dtype=np.float64)
    return {k: v + spread * rng.standard_normal(v.shape) for k, v in params.items()}


def model_loss_problem(config, seed=0, batch=2, beta=0.5, mixtoken=True):
    """A fixed (params, loss closure) pair for the full model and total loss."""
    rng = np.random.default_rng([seed, 2])
    params = randomized_params(config, seed)
    images = rng.uniform(size=(batch, config.in_chans, config.image_size, config.image_size))
    n, k = config.num_tokens, config.num_classes
    cls = one_hot(rng.integers(k, size=batch), k)
    tok = rng.dirichlet(np.ones(k), size=(batch, n))
    mix = None
    if mixtoken and batch > 1:
        m = sample_mask(config.grid_side, np.random.default_rng([seed, 3]))
        # ensure both sources appear on the grid
        if m.mean in (0.0, 1.0):
            flat = np.ones(n)
            flat[: n // 2] = 0.0
        else:
            flat = m.flat
        partner = np.arange(batch)[::-1].copy()
        mix = TokenMix(partner, flat)
        mbar = flat.mean()
        tok = np.where(flat.astype(bool)[None, :, None], tok, tok[partner])
        cls = mbar * cls + (1 - mbar) * cls[partner]

    def loss(leaves):
        cls_logits, tok_logits = model_forward(leaves, config, images, token_mix=mix)
        return total_loss(cls_logits, tok_logits, cls, tok, beta=beta).graph

    return params, loss


def gradcheck_model(config, seed=0, eps=1e-5, batch=2, beta=0.5, mixtoken=True):
    t0 = time.perf_counter()
    params, loss = model_loss_problem(config, seed, batch, beta, mixtoken)
    leaves = to_tensors(params)
    loss(leaves).backward()

    def value():
        return float(loss(params).data)

    worst = {}
    for name, arr in params.items():
        num = numeric_grad(value, arr, eps)
        ana = leaves[name].grad if leaves[name].grad is not None else np.zeros_like(arr)
        worst[name] = float(relative_error(ana, num).max())
    return GradcheckReport(worst, time.perf_counter() - t0)
