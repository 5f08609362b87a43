"""Aggregation rules over participants' model vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import AggregationError, ShapeError

AGGREGATORS = ("fedavg", "fedif", "krum", "mc_shapley", "fedprox")


@dataclass(frozen=True)
class AggregatorKind:
    """Which rule to run, plus the knobs each rule reads.

    ``wn``/``rn``/``su`` toggle weight normalization, round normalization and
    smooth update for ``fedif``; ``krum_f=None`` picks the default Byzantine
    count at run time.
    """

    name: str = "fedavg"
    fedavg_weighting: str = "uniform"
    prox_mu: float = 0.01
    krum_f: int | None = None
    shapley_permutations: int = 8
    gamma: float = 0.3
    wn: bool = True
    rn: bool = True
    su: bool = True

    def __post_init__(self):
        if self.name not in AGGREGATORS:
            raise AggregationError(f"aggregator must be one of {AGGREGATORS}, got {self.name!r}")
        if self.fedavg_weighting not in ("uniform", "size"):
            raise AggregationError("fedavg weighting must be 'uniform' or 'size'")
        if self.prox_mu < 0:
            raise AggregationError("FedProx mu must be >= 0")
        if self.krum_f is not None and self.krum_f < 0:
            raise AggregationError("Krum f must be >= 0")
        if self.shapley_permutations < 1:
            raise AggregationError("Shapley permutations must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise AggregationError("gamma must lie in (0, 1]")

    @property
    def uses_valuation(self) -> bool:
        return self.name in ("fedif", "mc_shapley")


def _stack(updates) -> np.ndarray:
    U = np.asarray(updates, dtype=np.float64)
    if U.ndim != 2 or U.shape[0] == 0:
        raise ShapeError("expected a non-empty list of equal-length parameter vectors")
    return U


def aggregate_weighted(updates, weights) -> np.ndarray:
    """Convex combination ``sum_i weights[i] * updates[i]``."""
    U = _stack(updates)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (U.shape[0],):
        raise ShapeError(f"{U.shape[0]} updates but {w.shape} weights")
    if np.any(w < 0):
        raise AggregationError("aggregation weights must be non-negative")
    return w @ U


def aggregate_fedavg(updates, sizes=None) -> np.ndarray:
    """Mean of the updates, weighted by local dataset sizes when ``sizes`` is given."""
    U = _stack(updates)
    m = U.shape[0]
    if sizes is None:
        w = np.full(m, 1.0 / m)
    else:
        s = np.asarray(sizes, dtype=np.float64)
        if s.shape != (m,) or s.sum() <= 0:
            raise ShapeError("sizes must be one positive count per update")
        w = s / s.sum()
    return aggregate_weighted(U, w)


def krum_scores(updates, f: int) -> np.ndarray:
    U = _stack(updates)
    m = U.shape[0]
    if m <= 2 * f + 2:
        raise AggregationError(f"Krum needs more than 2f+2 = {2 * f + 2} participants, got {m}")
    D = kernels.impl.pairwise_sq_dists(U)
    k = m - f - 2
    scores = np.empty(m)
    for i in range(m):
        others = np.delete(D[i], i)
        scores[i] = np.sort(others)[:k].sum()
    return scores


def aggregate_krum(updates, f: int) -> tuple[np.ndarray, int]:
    """Select the update with the smallest summed squared distance to its ``m - f - 2`` nearest neighbours.

    Returns ``(selected update, index)``; ties go to the lowest index.
    """
    scores = krum_scores(updates, f)
    idx = int(np.argmin(scores))
    return np.array(updates[idx], dtype=np.float64, copy=True), idx


def default_krum_f(m: int, n_level: float | None) -> int:
    """``floor(n_level * m)`` under attack, else 1; capped at the largest valid value for ``m``."""
    f = int(np.floor(n_level * m)) if n_level else 1
    return max(0, min(f, (m - 3) // 2))


def local_prox_term(w: np.ndarray, w_global: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    """FedProx proximal penalty ``mu/2 ||w - w_global||^2`` and its gradient."""
    diff = w - w_global
    return 0.5 * mu * float(diff @ diff), mu * diff
