"""Single convolution layer in front of the dense stack (numpy only).

Valid padding, stride 1, ReLU. Inputs are flat rows in channel-major
``(C, H, W)`` order, as produced by the IDX and CIFAR-10 loaders. The conv
parameters come first in the param vector: the ``(filters, C*k*k)`` kernel
matrix row-major, then one bias per filter. The activation map is flattened
position-major, ``(OH, OW, filters)``, before the dense layers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

CHUNK = 256  # examples per im2col block; bounds peak memory on image data


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    height: int
    width: int
    filters: int
    kernel: int = 3

    def __post_init__(self):
        if min(self.channels, self.height, self.width, self.filters, self.kernel) < 1:
            raise ShapeError("conv dimensions must be positive")
        if self.kernel > min(self.height, self.width):
            raise ShapeError(f"kernel {self.kernel} larger than the {self.height}x{self.width} image")

    @property
    def in_features(self) -> int:
        return self.channels * self.height * self.width

    @property
    def out_hw(self) -> tuple[int, int]:
        return self.height - self.kernel + 1, self.width - self.kernel + 1

    @property
    def out_features(self) -> int:
        oh, ow = self.out_hw
        return oh * ow * self.filters

    @property
    def patch(self) -> int:
        return self.channels * self.kernel * self.kernel

    @property
    def n_params(self) -> int:
        return self.filters * self.patch + self.filters


def split(params: np.ndarray, conv: ConvSpec):
    """(kernel matrix, bias, dense params) views."""
    nk = conv.filters * conv.patch
    return params[:nk].reshape(conv.filters, conv.patch), params[nk:nk + conv.filters], params[conv.n_params:]


def im2col(X: np.ndarray, conv: ConvSpec) -> np.ndarray:
    """``(n * OH * OW, C * k * k)`` patch matrix."""
    n = X.shape[0]
    imgs = X.reshape(n, conv.channels, conv.height, conv.width)
    win = sliding_window_view(imgs, (conv.kernel, conv.kernel), axis=(2, 3))  # n, C, OH, OW, k, k
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, conv.patch)


def col2im(dcols: np.ndarray, n: int, conv: ConvSpec) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch gradients back onto the image."""
    oh, ow = conv.out_hw
    k = conv.kernel
    d = dcols.reshape(n, oh, ow, conv.channels, k, k)
    out = np.zeros((n, conv.channels, conv.height, conv.width))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + oh, j:j + ow] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return out.reshape(n, -1)


def features(params: np.ndarray, conv: ConvSpec, X: np.ndarray):
    """Post-ReLU activation map, flattened per example, plus the patches and pre-activations."""
    K, b, _ = split(params, conv)
    cols = im2col(X, conv)
    Z = cols @ K.T + b
    return np.maximum(Z, 0.0).reshape(X.shape[0], -1), cols, Z


def forward(params, conv: ConvSpec, dense_sizes, X, impl) -> np.ndarray:
    out = []
    for s in range(0, X.shape[0], CHUNK):
        A, _, _ = features(params, conv, X[s:s + CHUNK])
        out.append(impl.forward(split(params, conv)[2], dense_sizes, A))
    return np.vstack(out) if out else np.zeros((0, dense_sizes[-1]))


def _backward(params, conv, dense_sizes, X, y, impl, per_example: bool):
    """Loss, conv-part parameter gradient, dense gradient and input gradient for one block."""
    K, _, dense = split(params, conv)
    n = X.shape[0]
    A, cols, Z = features(params, conv, X)
    loss, g_dense = impl.loss_grad(dense, dense_sizes, A, y)
    dA = impl.input_grad(dense, dense_sizes, A, y)  # per-example, not divided by n
    if not per_example:
        dA = dA / n
    dZ = dA.reshape(-1, conv.filters) * (Z > 0)
    gK = dZ.T @ cols
    gb = dZ.sum(axis=0)
    dX = col2im(dZ @ K, n, conv)
    return loss, np.concatenate([gK.ravel(), gb]), g_dense, dX


def loss_grad(params, conv: ConvSpec, dense_sizes, X, y, impl):
    n = X.shape[0]
    total = 0.0
    grad = np.zeros(params.size)
    for s in range(0, n, CHUNK):
        xb, yb = X[s:s + CHUNK], y[s:s + CHUNK]
        loss, g_conv, g_dense, _ = _backward(params, conv, dense_sizes, xb, yb, impl, per_example=False)
        w = len(yb) / n
        total += loss * w
        grad[:conv.n_params] += g_conv * w
        grad[conv.n_params:] += g_dense * w
    return total, grad


def input_grad(params, conv: ConvSpec, dense_sizes, X, y, impl) -> np.ndarray:
    out = [_backward(params, conv, dense_sizes, X[s:s + CHUNK], y[s:s + CHUNK], impl, per_example=True)[3]
           for s in range(0, X.shape[0], CHUNK)]
    return np.vstack(out)
