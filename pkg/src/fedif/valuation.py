"""Client valuation: trajectory round influence, normalization, smoothing, weights.

Also hosts the cumulative (unnormalized) influence diagnostic and the
Monte-Carlo permutation Shapley scorer used by the Shapley baseline.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ShapeError, ValuationError
from .rng import as_generator

log = logging.getLogger(__name__)


def validation_gradient(params: np.ndarray, spec: nn.ModelSpec, X, y, batch_size: int = 2048) -> np.ndarray:
    """Mean cross-entropy gradient over the whole validation set.

    Chunks are visited in index order and combined with weights
    ``len(chunk) / n``, so the result is independent of ``batch_size`` up to
    rounding.
    """
    n = len(y)
    if n == 0:
        raise ValuationError("validation set is empty; influence scoring needs a validation split")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if n <= batch_size:
        return nn.loss_and_param_grad(params, spec, X, y)[1]
    grad = np.zeros(spec.n_params)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        _, g = nn.loss_and_param_grad(params, spec, X[start:stop], y[start:stop])
        grad += g * ((stop - start) / n)
    return grad


def round_influence(delta_w: np.ndarray, val_grad: np.ndarray, normalize: bool = True) -> float:
    """Dot product of the client's update direction ``w_prev - w_client`` with the validation gradient.

    With ``normalize`` the update is scaled to unit L2 norm first. A
    zero-length update scores 0.
    """
    if delta_w.shape != val_grad.shape:
        raise ShapeError(f"update {delta_w.shape} and gradient {val_grad.shape} differ in shape")
    if not normalize:
        return float(delta_w @ val_grad)
    norm = float(np.linalg.norm(delta_w))
    if norm == 0.0:
        log.warning("client update has zero norm; round influence set to 0")
        return 0.0
    return float(delta_w @ val_grad) / norm


def minmax_normalize(phi) -> np.ndarray:
    """Affine map of the round's scores onto [0, 1]; all-equal scores map to 1."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.size == 0:
        raise ValuationError("cannot normalize an empty set of influence scores")
    lo, hi = phi.min(), phi.max()
    if hi == lo:
        return np.ones_like(phi)
    psi = (phi - lo) / (hi - lo)
    return np.clip(psi, 0.0, 1.0)


def smooth_update(omega_prev, psi, gamma: float, participated=True):
    """Exponential smoothing ``(1 - gamma) * omega + gamma * psi``; non-participants keep their value.

    Evaluated as ``omega + gamma * (psi - omega)``, which rounds better (e.g.
    ``0.5, 1.0, 0.3`` gives exactly ``0.65``).
    """
    omega_prev = np.asarray(omega_prev, dtype=np.float64)
    new = omega_prev + gamma * (np.asarray(psi, dtype=np.float64) - omega_prev)
    out = np.where(participated, new, omega_prev)
    return float(out) if out.ndim == 0 else out


def aggregation_weights(omega) -> np.ndarray:
    """Weights proportional to the participants' global influence.

    Negative influence (possible only with round normalization disabled)
    counts as zero. If nothing positive remains the weights are uniform.
    """
    omega = np.clip(np.asarray(omega, dtype=np.float64), 0.0, None)
    if omega.size == 0:
        raise ValuationError("no participants to weight")
    total = omega.sum()
    if total <= 0.0:
        return np.full(omega.size, 1.0 / omega.size)
    return omega / total


def cumulative_influence(pairs) -> float:
    """Sum of unnormalized ``delta_w . val_grad`` over the rounds a client took part in."""
    return float(sum(float(np.dot(dw, g)) for dw, g in pairs))


@dataclass
class InfluenceLedger:
    """Global influence of every client plus the switches of the ablation study.

    ``weight_norm`` scales each update to unit length before scoring,
    ``round_norm`` min-max normalizes scores within a round and
    ``smooth`` applies the exponential smoothing (otherwise a participant's
    global influence is replaced by this round's score).
    """

    n_clients: int
    gamma: float
    weight_norm: bool = True
    round_norm: bool = True
    smooth: bool = True
    omega: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValuationError("gamma must lie in (0, 1]")
        if self.omega is None:
            self.omega = np.zeros(self.n_clients)

    def score(self, delta_w: np.ndarray, val_grad: np.ndarray) -> float:
        return round_influence(delta_w, val_grad, normalize=self.weight_norm)

    def update(self, clients, phi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fold one round of scores in; returns (psi, omega of participants, weights)."""
        clients = np.asarray(clients, dtype=np.int64)
        phi = np.asarray(phi, dtype=np.float64)
        psi = minmax_normalize(phi) if self.round_norm else phi.copy()
        gamma = self.gamma if self.smooth else 1.0
        self.omega[clients] = smooth_update(self.omega[clients], psi, gamma)
        omega = self.omega[clients].copy()
        return psi, omega, aggregation_weights(omega)


def _average(models: np.ndarray, members) -> np.ndarray:
    # sorted so a coalition's model does not depend on arrival order
    return models[np.sort(members)].mean(axis=0)


def mc_shapley_scores(models, prev_global: np.ndarray, spec: nn.ModelSpec, X_val, y_val,
                      permutations: int = 8, seed=0, all_permutations: bool = False) -> np.ndarray:
    """Permutation-sampled Shapley values of participants' models.

    The value of a coalition is the validation accuracy of the uniform
    average of its members' models; the empty coalition is worth the accuracy
    of ``prev_global``. Every coalition along every permutation is rebuilt and
    re-evaluated, which is what makes this valuation expensive. With
    ``all_permutations`` every ordering is walked exactly once.
    """
    models = np.asarray(models, dtype=np.float64)
    m = models.shape[0]
    if m == 0:
        raise ValuationError("no participant models to score")
    if models.shape[1] != prev_global.shape[0]:
        raise ShapeError("participant models and previous global model differ in length")
    if permutations < 1 and not all_permutations:
        raise ValuationError("need at least one permutation")
    if all_permutations:
        orders = [np.array(p) for p in itertools.permutations(range(m))]
    else:
        rng = as_generator(seed)
        orders = [rng.permutation(m) for _ in range(permutations)]
    base = nn.accuracy(prev_global, spec, X_val, y_val)
    scores = np.zeros(m)
    for order in orders:
        prev_value = base
        for k in range(m):
            value = nn.accuracy(_average(models, order[:k + 1]), spec, X_val, y_val)
            scores[order[k]] += value - prev_value
            prev_value = value
    return scores / len(orders)

