"""Independent oracles shared by the tests (no library code on the checked path)."""
from __future__ import annotations

import itertools
import math

import numpy as np

FD_STEP = 1e-5


def central_diff(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return out


def max_rel_error(got, ref, floor: float = 1e-8) -> float:
    """Largest per-coordinate relative error over coordinates with magnitude above ``floor``."""
    got, ref = np.ravel(got), np.ravel(ref)
    scale = np.maximum(np.abs(got), np.abs(ref))
    mask = scale > floor
    if not mask.any():
        return float(np.max(np.abs(got - ref))) if got.size else 0.0
    return float(np.max(np.abs(got - ref)[mask] / scale[mask]))


def reference_loss(params, sizes, X, y) -> float:
    """Plain-loop MLP cross-entropy written from the layout definition."""
    off = 0
    a = np.asarray(X, dtype=np.float64)
    n_layers = len(sizes) - 1
    for k in range(n_layers):
        fi, fo = sizes[k], sizes[k + 1]
        W = params[off:off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = params[off:off + fo]
        off += fo
        a = a @ W + b
        if k < n_layers - 1:
            a = np.maximum(a, 0.0)
    total = 0.0
    for row, label in zip(a, y):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[label]
    return total / len(y)


def brute_force_shapley(value, m: int) -> np.ndarray:
    """Shapley values from the subset formula."""
    phi = np.zeros(m)
    for i in range(m):
        rest = [j for j in range(m) if j != i]
        for r in range(m):
            weight = math.factorial(r) * math.factorial(m - r - 1) / math.factorial(m)
            for S in itertools.combinations(rest, r):
                phi[i] += weight * (value(set(S) | {i}) - value(set(S)))
    return phi


def brute_force_krum(U: np.ndarray, f: int) -> int:
    m = len(U)
    k = m - f - 2
    best, best_i = None, None
    for i in range(m):
        d = sorted(float(np.sum((U[i] - U[j]) ** 2)) for j in range(m) if j != i)
        s = sum(d[:k])
        if best is None or s < best:
            best, best_i = s, i
    return best_i


def reference_conv_loss(params, conv, dense_sizes, X, y) -> float:
    """Direct-loop valid convolution + ReLU, then :func:`reference_loss` on the flattened map."""
    C, H, W, F, k = conv.channels, conv.height, conv.width, conv.filters, conv.kernel
    K = params[:F * C * k * k].reshape(F, C, k, k)
    b = params[F * C * k * k:F * C * k * k + F]
    dense = params[F * C * k * k + F:]
    oh, ow = H - k + 1, W - k + 1
    maps = np.zeros((len(X), oh, ow, F))
    for n, row in enumerate(np.asarray(X, dtype=np.float64)):
        img = row.reshape(C, H, W)
        for i in range(oh):
            for j in range(ow):
                for f in range(F):
                    maps[n, i, j, f] = max(0.0, float(np.sum(K[f] * img[:, i:i + k, j:j + k])) + b[f])
    return reference_loss(dense, dense_sizes, maps.reshape(len(X), -1), y)
