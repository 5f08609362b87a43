"""Numeric checks of the analysis: the weighted gradient-variance decomposition
and the weighted noise term under influence weights versus uniform weights."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


def variance_identity_check(grads, weights) -> tuple[float, float, float]:
    """Both sides of ``sum_i p_i |g_i|^2 = sum_i p_i |g_i - gbar|^2 + |gbar|^2``.

    ``gbar = sum_i p_i g_i`` and the weights must sum to one. Returns
    ``(lhs, rhs, |lhs - rhs|)``.
    """
    G = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    p = np.asarray(weights, dtype=np.float64)
    if p.shape != (G.shape[0],):
        raise ValueError(f"{G.shape[0]} gradients but {p.shape} weights")
    if np.any(p < 0) or not np.isclose(p.sum(), 1.0, rtol=0, atol=1e-12):
        raise ValueError("weights must be non-negative and sum to 1")
    gbar = p @ G
    lhs = float(p @ np.einsum("ij,ij->i", G, G))
    dev = G - gbar
    rhs = float(p @ np.einsum("ij,ij->i", dev, dev)) + float(gbar @ gbar)
    return lhs, rhs, abs(lhs - rhs)


@dataclass
class NoiseTermReport:
    rounds: list[int] = field(default_factory=list)
    weighted: list[float] = field(default_factory=list)
    uniform: list[float] = field(default_factory=list)
    ratio: list[float | None] = field(default_factory=list)
    noisy: list[bool] = field(default_factory=list)

    def _noisy(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64)[np.asarray(self.noisy, dtype=bool)]

    @property
    def n_noisy_rounds(self) -> int:
        return int(sum(self.noisy))

    @property
    def fraction_weighted_le_uniform(self) -> float | None:
        if not self.n_noisy_rounds:
            return None
        return float(np.mean(self._noisy(self.weighted) <= self._noisy(self.uniform)))

    @property
    def median_weighted(self) -> float | None:
        return float(np.median(self._noisy(self.weighted))) if self.n_noisy_rounds else None

    @property
    def median_uniform(self) -> float | None:
        return float(np.median(self._noisy(self.uniform))) if self.n_noisy_rounds else None

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(
            n_noisy_rounds=self.n_noisy_rounds,
            fraction_weighted_le_uniform=self.fraction_weighted_le_uniform,
            median_weighted=self.median_weighted,
            median_uniform=self.median_uniform,
        )
        return out


def noise_sums(weights, delta_sq_norms) -> tuple[float, float]:
    """``sum_i p_i |delta_i|^2`` under the given weights and under uniform weights."""
    p = np.asarray(weights, dtype=np.float64)
    d = np.asarray(delta_sq_norms, dtype=np.float64)
    return float(p @ d), float(d.mean()) if d.size else 0.0


def noise_term_report(records) -> NoiseTermReport:
    """Compare the weighted noise term of each round against uniform averaging.

    ``records`` are round records (or dicts) carrying per-participant
    ``weights`` and ``delta_norm`` keyed by client id. Records without any
    ``delta_norm`` entries (runs without update noise) are skipped; summary
    statistics cover the rounds in which some participant was noisy.
    """
    report = NoiseTermReport()
    for rec in records:
        get = rec.get if isinstance(rec, dict) else lambda k, r=rec: getattr(r, k)
        deltas = {int(k): v for k, v in (get("delta_norm") or {}).items()}
        if not deltas:
            continue
        weights = {int(k): v for k, v in (get("weights") or {}).items()}
        ids = [int(c) for c in get("participants")]
        if not weights:
            weights = {c: 1.0 / len(ids) for c in ids}
        d2 = [float(deltas.get(c, 0.0)) ** 2 for c in ids]
        p = [float(weights[c]) for c in ids]
        w_sum, u_sum = noise_sums(p, d2)
        report.rounds.append(int(get("round")))
        report.weighted.append(w_sum)
        report.uniform.append(u_sum)
        report.ratio.append(w_sum / u_sum if u_sum > 0 else None)
        report.noisy.append(any(v > 0 for v in d2))
    return report
