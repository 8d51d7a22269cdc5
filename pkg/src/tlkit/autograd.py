"""A minimal reverse-mode differentiation engine over numpy arrays.

Every primitive below computes its forward value eagerly and registers a
closure that maps the output gradient to gradients of its inputs.  Calling
``Tensor.backward()`` on a scalar walks the recorded graph in reverse
topological order and accumulates into ``.grad``.

Only the primitives the vision transformer needs are provided.  The dtype of a
graph follows its leaves (float64 for gradient checks, float32 for training).
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _make(data, parents, backward):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def mul(a, b):
    """Elementwise product with broadcasting; either side may be a constant."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def scale(x, c):
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def gelu(x):
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward)


# ----------------------------------------------------------------- reductions


def sum_(x):
    x = as_tensor(x)
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    inv = x.data.dtype.type(1.0 / n)
    # sum-then-divide keeps the value equal to an explicit (1/N)·Σ reference
    out = x.data.sum() / x.data.dtype.type(n)
    return _make(out, (x,), lambda g: (np.full(x.shape, g * inv, dtype=x.data.dtype),))


# ------------------------------------------------------------------ structure


def reshape(x, shape):
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x, index):
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), backward)


def take(x, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    indices = np.asarray(indices)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, indices, axis=axis), (x,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def broadcast_to(x, shape):
    x = as_tensor(x)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


# -------------------------------------------------------------------- linear


def linear(x, weight, bias=None):
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ weight.data.T) if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward)


def matmul(a, b):
    """Batched matmul over identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def layer_norm(x, weight, bias, eps=1e-6):
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        dxhat = g * weight.data
        n = x.shape[-1]
        gx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward)


def softmax(x):
    """Softmax over the last axis (max-subtracted)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward)


def logsumexp(z):
    """Row-wise stabilized log-sum-exp over the last axis (plain numpy)."""
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def soft_cross_entropy(logits, labels):
    """Per-row ``-Σ_k y_k log softmax(z)_k`` for (..., K) logits and constant labels."""
    logits = as_tensor(logits)
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=logits.dtype)
    z = logits.data
    lse = logsumexp(z)
    ysum = y.sum(axis=-1)
    out = lse * ysum - (y * z).sum(axis=-1)

    def backward(g):
        p = np.exp(z - lse[..., None])
        return (g[..., None] * (p * ysum[..., None] - y),)

    return _make(out, (logits,), backward)


# ---------------------------------------------------------------- convolution


def conv_output_size(size, kernel, stride, pad):
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x, weight, bias, stride, pad):
    """NCHW convolution; weight is (F, C, k, k).

    Works channels-last internally: non-overlapping kernels (k == stride) are a
    single reshape + matmul, other kernels a sum of k*k shifted matmuls.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    b, c, h, w = x.shape
    f, k = weight.shape[0], weight.shape[-1]
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    xh = x.data.transpose(0, 2, 3, 1)
    if pad:
        xh = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    tiled = k == stride and not pad and ho * k == h and wo * k == w

    if tiled:
        cols = xh.reshape(b, ho, k, wo, k, c).transpose(0, 1, 3, 2, 4, 5).reshape(b * ho * wo, k * k * c)
        wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * k * c, f)
        out = cols @ wmat
    else:

        def window(i, j):
            return xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :].reshape(-1, c)

        # contiguous (C, F) / (F, C) taps keep matmul on the BLAS path
        taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))
        out = np.zeros((b * ho * wo, f), dtype=x.data.dtype)
        for i in range(k):
            for j in range(k):
                out += window(i, j) @ taps[i, j]
    out = (out + bias.data).reshape(b, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gb = g2.sum(axis=0)
        gw = gx = None
        if tiled:
            if weight.requires_grad:
                gw = (cols.T @ g2).reshape(k, k, c, f).transpose(3, 2, 0, 1)
            if x.requires_grad:
                gx = (g2 @ wmat.T).reshape(b, ho, wo, k, k, c).transpose(0, 5, 1, 3, 2, 4).reshape(x.shape)
            return gx, gw, gb
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gw[:, :, i, j] = g2.T @ window(i, j)
        if x.requires_grad:
            taps_t = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1))
            gxh = np.zeros(xh.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (
                        g2 @ taps_t[i, j]
                    ).reshape(b, ho, wo, c)
            if pad:
                gxh = gxh[:, pad : pad + h, pad : pad + w, :]
            gx = gxh.transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _make(out, (x, weight, bias), backward)
