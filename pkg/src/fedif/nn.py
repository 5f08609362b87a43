"""Feed-forward ReLU network with manual backpropagation and SGD with momentum.

Parameters live in one flat float64 vector (a "param vector"): for every layer
the row-major ``(fan_in, fan_out)`` weight matrix, then its bias. All
functions are pure; the heavy lifting is delegated to :mod:`fedif.kernels`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import conv as _conv
from . import kernels
from .conv import ConvSpec
from .errors import NumericError, ShapeError


@dataclass(frozen=True)
class ModelSpec:
    """Layer sizes from input to logits, e.g. ``(784, 64, 10)``.

    With ``conv`` set, a single convolution layer sits between the input and
    the first hidden layer; ``layer_sizes[0]`` is still the raw input width.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    conv: ConvSpec | None = None

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 3:
            raise ShapeError("model needs an input size, at least one hidden layer and a class count")
        if any(s <= 0 for s in sizes):
            raise ShapeError(f"layer sizes must be positive, got {sizes}")
        if self.activation != "relu":
            raise ShapeError(f"unsupported activation {self.activation!r}")
        if self.conv is not None and self.conv.in_features != sizes[0]:
            raise ShapeError(f"conv input {self.conv.in_features} does not match input size {sizes[0]}")

    @classmethod
    def mlp(cls, n_inputs: int, hidden, n_classes: int) -> "ModelSpec":
        return cls((n_inputs, *hidden, n_classes))

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def dense_sizes(self) -> tuple[int, ...]:
        """Sizes seen by the dense stack (conv output width replaces the input width)."""
        if self.conv is None:
            return self.layer_sizes
        return (self.conv.out_features, *self.layer_sizes[1:])

    @property
    def shapes(self) -> list[tuple[int, int]]:
        """Dense ``(fan_in, fan_out)`` pairs."""
        d = self.dense_sizes
        return list(zip(d[:-1], d[1:]))

    @property
    def n_params(self) -> int:
        extra = self.conv.n_params if self.conv else 0
        return extra + sum(i * o + o for i, o in self.shapes)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
    chunks = []
    if spec.conv is not None:
        bound = 1.0 / np.sqrt(spec.conv.patch)
        chunks.append(rng.uniform(-bound, bound, size=spec.conv.n_params))
    for fan_in, fan_out in spec.shapes:
        bound = 1.0 / np.sqrt(fan_in)
        chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        chunks.append(rng.uniform(-bound, bound, size=fan_out))
    return np.concatenate(chunks)


def unflatten(params: np.ndarray, spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a param vector into ``(W, b)`` views, one pair per layer.

    With a conv layer the first pair is the ``(filters, C*k*k)`` kernel matrix and its bias.
    """
    _check_params(params, spec)
    layers = []
    off = 0
    if spec.conv is not None:
        K, b, _ = _conv.split(params, spec.conv)
        layers.append((K, b))
        off = spec.conv.n_params
    for fan_in, fan_out in spec.shapes:
        w = params[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
        off += fan_in * fan_out
        layers.append((w, params[off:off + fan_out]))
        off += fan_out
    return layers


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers]).astype(np.float64)


def _check_params(params, spec):
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {params.shape}")


def _check_batch(spec, X, y=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise ShapeError(f"batch must be (n, {spec.n_inputs}), got {X.shape}")
    if y is None:
        return X, None
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (X.shape[0],):
        raise ShapeError(f"labels must be ({X.shape[0]},), got {y.shape}")
    if X.shape[0] == 0:
        raise ShapeError("batch is empty")
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ShapeError(f"labels must lie in [0, {spec.n_classes})")
    return X, y


def _finite(params):
    if not np.all(np.isfinite(params)):
        raise NumericError("parameter vector contains non-finite values")


def forward(params: np.ndarray, spec: ModelSpec, X) -> np.ndarray:
    """Logits, one row per example."""
    params = np.asarray(params, dtype=np.float64)
    _check_params(params, spec)
    X, _ = _check_batch(spec, X)
    if spec.conv is not None:
        return _conv.forward(params, spec.conv, spec.dense_sizes, X, kernels.impl)
    return kernels.impl.forward(params, spec.layer_sizes, X)


def predict(params: np.ndarray, spec: ModelSpec, X) -> np.ndarray:
    return np.argmax(forward(params, spec, X), axis=1)


def accuracy(params: np.ndarray, spec: ModelSpec, X, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(params, spec, X) == np.asarray(y)))


def loss_and_param_grad(params: np.ndarray, spec: ModelSpec, X, y) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    params = np.asarray(params, dtype=np.float64)
    _check_params(params, spec)
    _finite(params)
    X, y = _check_batch(spec, X, y)
    if spec.conv is not None:
        return _conv.loss_grad(params, spec.conv, spec.dense_sizes, X, y, kernels.impl)
    return kernels.impl.loss_grad(params, spec.layer_sizes, X, y)


def mean_loss(params: np.ndarray, spec: ModelSpec, X, y, batch_size: int = 4096) -> float:
    """Mean cross-entropy over a dataset, evaluated in chunks."""
    X, y = _check_batch(spec, X, y)
    total = 0.0
    for start in range(0, len(y), batch_size):
        xb, yb = X[start:start + batch_size], y[start:start + batch_size]
        if spec.conv is not None:
            loss = float(np.mean(_xent(forward(params, spec, xb), yb)))
        else:
            loss, _ = kernels.impl.loss_grad(params, spec.layer_sizes, xb, yb)
        total += loss * len(y[start:start + batch_size])
    return total / len(y)


def loss_input_grad(params: np.ndarray, spec: ModelSpec, X, y) -> np.ndarray:
    """Per-example input gradients: row ``i`` is the gradient of example ``i``'s own loss.

    Unlike :func:`loss_and_param_grad` this is not divided by the batch size,
    so a row does not change when the batch is duplicated.
    """
    params = np.asarray(params, dtype=np.float64)
    _check_params(params, spec)
    _finite(params)
    X, y = _check_batch(spec, X, y)
    if spec.conv is not None:
        return _conv.input_grad(params, spec.conv, spec.dense_sizes, X, y, kernels.impl)
    return kernels.impl.input_grad(params, spec.layer_sizes, X, y)


def _xent(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")

    @classmethod
    def fresh(cls, n_params: int, lr: float, momentum: float = 0.0) -> "OptimizerState":
        return cls(lr, momentum, np.zeros(n_params))


def sgd_step(params: np.ndarray, grad: np.ndarray, state: OptimizerState) -> tuple[np.ndarray, OptimizerState]:
    """``v' = m v + g``; ``params' = params - lr v'``. Inputs are not modified."""
    velocity = state.velocity if state.velocity is not None else np.zeros_like(params)
    if not (params.shape == grad.shape == velocity.shape):
        raise ShapeError(f"shape mismatch: params {params.shape}, grad {grad.shape}, velocity {velocity.shape}")
    v = state.momentum * velocity + grad
    return params - state.lr * v, OptimizerState(state.lr, state.momentum, v)
