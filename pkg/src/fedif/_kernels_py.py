"""Pure numpy kernels.

Reference implementation of the hot loops; ``_kernels.pyx`` mirrors this API.
Parameter layout: for each layer, the row-major ``(fan_in, fan_out)`` weight
matrix followed by the bias vector.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def _layers(params, sizes):
    out = []
    off = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        b = params[off:off + fan_out]
        off += fan_out
        out.append((w, b))
    return out


def _forward_cache(layers, X):
    acts = [X]
    pre = []
    h = X
    for i, (w, b) in enumerate(layers):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    return pre, acts


def _softmax_xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(len(y))
    losses = np.log(s[:, 0]) - z[rows, y]
    probs[rows, y] -= 1.0
    return losses, probs


def forward(params, sizes, X):
    h = X
    layers = _layers(params, sizes)
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def _backward(layers, pre, acts, delta, grad=None):
    """Backprop ``delta`` (dL/dlogits). Fills ``grad`` if given; returns dL/dX."""
    off_end = 0 if grad is None else grad.size
    for i in range(len(layers) - 1, -1, -1):
        w, b = layers[i]
        if grad is not None:
            gb = grad[off_end - b.size:off_end]
            gw = grad[off_end - b.size - w.size:off_end - b.size].reshape(w.shape)
            np.sum(delta, axis=0, out=gb)
            np.matmul(acts[i].T, delta, out=gw)
            off_end -= w.size + b.size
        delta = delta @ w.T
        if i > 0:
            delta *= pre[i - 1] > 0
    return delta


def loss_grad(params, sizes, X, y):
    layers = _layers(params, sizes)
    pre, acts = _forward_cache(layers, X)
    losses, delta = _softmax_xent(acts[-1], y)
    n = len(y)
    delta /= n
    grad = np.empty_like(params)
    _backward(layers, pre, acts, delta, grad)
    return float(losses.sum() / n), grad


def input_grad(params, sizes, X, y):
    layers = _layers(params, sizes)
    pre, acts = _forward_cache(layers, X)
    _, delta = _softmax_xent(acts[-1], y)
    return _backward(layers, pre, acts, delta)


def train_epochs(params, sizes, X, y, order, batch_size, lr, momentum, prox_mu=0.0, anchor=None):
    """Mini-batch SGD with momentum over the epoch permutations in ``order``.

    Returns the final parameters and the mean per-example loss of each epoch.
    """
    w = np.array(params, dtype=np.float64, copy=True)
    v = np.zeros_like(w)
    n = X.shape[0]
    losses = np.zeros(order.shape[0])
    for e in range(order.shape[0]):
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[e, start:start + batch_size]
            loss, g = loss_grad(w, sizes, X[idx], y[idx])
            if prox_mu:
                g += prox_mu * (w - anchor)
            v *= momentum
            v += g
            w -= lr * v
            total += loss * len(idx)
        losses[e] = total / n
    return w, losses


def pairwise_sq_dists(U):
    m = U.shape[0]
    D = np.zeros((m, m))
    for i in range(m):
        diff = U[i + 1:] - U[i]
        D[i, i + 1:] = np.einsum("ij,ij->i", diff, diff)
    return D + D.T
