"""Adversary injectors: label flipping, Gaussian update noise, PGD samples.

Every injector is a pure function of its inputs and a seed (or Generator).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import AttackError, ShapeError
from .rng import as_generator

ATTACK_KINDS = ("none", "label_noise", "gradient_noise", "adversarial")


@dataclass(frozen=True)
class PGDConfig:
    eps: float = 0.03
    step: float = 0.01
    iters: int = 20
    norm: str = "linf"

    def __post_init__(self):
        if self.eps <= 0 or self.step <= 0:
            raise AttackError("PGD eps and step must be positive")
        if self.iters < 0:
            raise AttackError("PGD iterations must be >= 0")
        if self.norm != "linf":
            raise AttackError(f"only the L-inf norm is supported, got {self.norm!r}")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    n_level: float = 0.0
    n_ratio: tuple[float, float] = (0.0, 0.0)
    sigma: float = 0.0
    mu: float = 0.0
    pgd: PGDConfig = field(default_factory=PGDConfig)

    def __post_init__(self):
        object.__setattr__(self, "n_ratio", tuple(float(r) for r in self.n_ratio))
        if self.kind not in ATTACK_KINDS:
            raise AttackError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.n_level <= 1.0:
            raise AttackError("n_level must lie in [0, 1]")
        lo, hi = self.n_ratio
        if not 0.0 <= lo <= hi <= 1.0:
            raise AttackError("n_ratio must satisfy 0 <= lower <= upper <= 1")
        if self.sigma < 0:
            raise AttackError("sigma must be >= 0")
        if self.kind == "adversarial" and self.pgd.iters < 1:
            raise AttackError("adversarial attack needs at least one PGD iteration")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.n_level > 0


@dataclass(frozen=True)
class AdversaryAssignment:
    noisy: tuple[int, ...]
    fractions: dict[int, float]

    def is_noisy(self, client: int) -> bool:
        return client in self.fractions


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def assign_adversaries(n_clients: int, config: AttackConfig, seed) -> AdversaryAssignment:
    """Mark ``round(n_level * K)`` clients noisy; each gets a noisy-sample fraction from U[n_ratio]."""
    rng = as_generator(seed)
    if config.kind == "none":
        return AdversaryAssignment((), {})
    count = min(round_half_up(config.n_level * n_clients), n_clients)
    noisy = np.sort(rng.choice(n_clients, size=count, replace=False))
    lo, hi = config.n_ratio
    fractions = rng.uniform(lo, hi, size=count)
    return AdversaryAssignment(
        tuple(int(c) for c in noisy), {int(c): float(f) for c, f in zip(noisy, fractions)}
    )


def choose_noisy_samples(n: int, fraction: float, seed) -> np.ndarray:
    """Sorted indices of exactly ``floor(fraction * n)`` samples."""
    k = int(math.floor(fraction * n + 1e-9))
    return np.sort(as_generator(seed).choice(n, size=k, replace=False))


def flip_labels(labels, fraction: float, n_classes: int, seed) -> np.ndarray:
    """Reassign ``floor(fraction * n)`` seed-chosen labels to a uniformly random different class."""
    if n_classes < 2:
        raise AttackError("label flipping needs at least two classes")
    rng = as_generator(seed)
    out = np.array(labels, dtype=np.int64, copy=True)
    idx = choose_noisy_samples(len(out), fraction, rng)
    out[idx] = (out[idx] + rng.integers(1, n_classes, size=len(idx))) % n_classes
    return out


def perturb_update(update: np.ndarray, mu: float, sigma: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Add i.i.d. N(mu, sigma^2) noise to every coordinate; returns (noisy, noise)."""
    if sigma == 0.0 and mu == 0.0:
        delta = np.zeros_like(update)
    else:
        delta = as_generator(seed).normal(mu, sigma, size=update.shape)
    return update + delta, delta


def pgd_attack(params: np.ndarray, spec: nn.ModelSpec, X, y, pgd: PGDConfig, seed) -> np.ndarray:
    """L-inf PGD from a uniform random start inside the eps-ball, clipped to [0, 1]."""
    X0 = np.asarray(X, dtype=np.float64)
    if X0.ndim != 2 or X0.shape[1] != spec.n_inputs:
        raise ShapeError(f"batch must be (n, {spec.n_inputs}), got {X0.shape}")
    if pgd.eps <= 0 or pgd.step <= 0:
        raise AttackError("PGD eps and step must be positive")
    rng = as_generator(seed)
    lo = np.maximum(X0 - pgd.eps, 0.0)
    hi = np.minimum(X0 + pgd.eps, 1.0)
    x = np.clip(X0 + rng.uniform(-pgd.eps, pgd.eps, size=X0.shape), lo, hi)
    if len(x) == 0:
        return x
    for _ in range(pgd.iters):
        g = nn.loss_input_grad(params, spec, x, y)
        x = np.clip(x + pgd.step * np.sign(g), lo, hi)
    return x
