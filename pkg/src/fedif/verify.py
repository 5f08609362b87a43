"""Self-checks run by ``fedif verify``: each compares a library routine to an
independent computation on random instances."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import nn, valuation
from .theory import variance_identity_check


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    cases: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: worst {self.worst:.3e} (tol {self.tolerance:.0e}, {self.cases} cases)"


def finite_difference_grad(f, w: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``w``."""
    g = np.zeros_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def check_variance_identity(cases: int = 100, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        m, d = rng.integers(1, 12), rng.integers(1, 50)
        G = rng.normal(size=(m, d)) * rng.uniform(0.1, 10)
        p = rng.dirichlet(np.ones(m))
        lhs, _, gap = variance_identity_check(G, p)
        worst = max(worst, gap / max(1.0, abs(lhs)))
    return CheckResult("weighted variance decomposition", worst <= tol, worst, tol, cases)


def check_gradients(cases: int = 10, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Backprop parameter and input gradients against central differences (relative error)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        sizes = (int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5)))
        spec = nn.ModelSpec(sizes)
        w = nn.init_params(spec, rng)
        X = rng.uniform(0, 1, size=(4, sizes[0]))
        y = rng.integers(0, sizes[-1], size=4)
        _, g = nn.loss_and_param_grad(w, spec, X, y)
        fd = finite_difference_grad(lambda v: nn.loss_and_param_grad(v, spec, X, y)[0], w)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
        gx = nn.loss_input_grad(w, spec, X, y)
        for i in range(len(y)):
            row = lambda x, i=i: nn.loss_and_param_grad(w, spec, x[None, :], y[i:i + 1])[0]
            fdx = finite_difference_grad(row, X[i].copy())
            worst = max(worst, np.linalg.norm(gx[i] - fdx) / max(np.linalg.norm(fdx), 1e-12))
    return CheckResult("gradients vs finite differences", worst <= tol, float(worst), tol, cases)


def exact_shapley(value, m: int) -> np.ndarray:
    """Shapley values by subset enumeration: sum over S of |S|!(m-|S|-1)!/m! (v(S+i) - v(S))."""
    out = np.zeros(m)
    for i in range(m):
        others = [j for j in range(m) if j != i]
        for r in range(m):
            coef = math.factorial(r) * math.factorial(m - r - 1) / math.factorial(m)
            for S in itertools.combinations(others, r):
                out[i] += coef * (value(frozenset(S) | {i}) - value(frozenset(S)))
    return out


def check_shapley(seed: int = 0, tol: float = 1e-12, sizes=(2, 3, 4)) -> CheckResult:
    """Exhaustive permutation walk against subset enumeration on small coalitions."""
    rng = np.random.default_rng(seed)
    spec = nn.ModelSpec((3, 4, 3))
    X = rng.uniform(0, 1, size=(30, 3))
    y = rng.integers(0, 3, size=30)
    worst = 0.0
    for m in sizes:
        prev = nn.init_params(spec, rng)
        models = np.stack([prev + rng.normal(scale=0.8, size=prev.size) for _ in range(m)])

        def value(S):
            if not S:
                return nn.accuracy(prev, spec, X, y)
            return nn.accuracy(models[sorted(S)].mean(axis=0), spec, X, y)

        got = valuation.mc_shapley_scores(models, prev, spec, X, y, all_permutations=True)
        worst = max(worst, float(np.max(np.abs(got - exact_shapley(value, m)))))
    return CheckResult("exhaustive Shapley vs subset enumeration", worst <= tol, worst, tol, len(sizes))


def run_all(seed: int = 0) -> list[CheckResult]:
    return [check_variance_identity(seed=seed), check_gradients(seed=seed), check_shapley(seed=seed)]
