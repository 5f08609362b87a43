"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
with the measured values; the lines are printed together at the end of the
session (see conftest.py).

Desk-scale experiments use configs/desk.toml (20 clients, 5 per round, 30
rounds, 256-feature Gaussian blobs, one hidden layer of 32) with seeds 0-4.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from fedif import cli, nn
from fedif.adversary import PGDConfig, pgd_attack
from fedif.config import load_config
from fedif.io import deterministic_columns
from fedif.simulation import Simulation, local_training, run_simulation
from fedif.theory import variance_identity_check, noise_term_report
from fedif.valuation import aggregation_weights, mc_shapley_scores, minmax_normalize, smooth_update
from helpers import brute_force_shapley, central_diff, max_rel_error, reference_loss

pytestmark = pytest.mark.acceptance

ROOT = Path(__file__).resolve().parent.parent
DESK = ROOT / "configs" / "desk.toml"
BENCH = ROOT / "configs" / "bench.toml"
SEEDS = (0, 1, 2, 3, 4)
LN = ["attack.kind=label_noise", "attack.n_level=0.5", "attack.n_ratio=[0.5, 0.6]"]
GN = ["attack.kind=gradient_noise", "attack.n_level=0.5", "attack.sigma=0.1"]


def record(report_line, number: int, name: str, ok: bool, detail: str, seconds: float, budget: float):
    ok_time = seconds < budget
    status = "PASS" if ok and ok_time else "FAIL"
    report_line(f"criterion {number:2d} [{status}] {name}: {detail} ({seconds:.1f} s, budget {budget:.0f} s)")
    assert ok, detail
    assert ok_time, f"took {seconds:.1f} s, budget {budget} s"


def desk_final_acc(overrides, seed, keep=False):
    config, _, _ = load_config(DESK, list(overrides) + [f"seed={seed}"])
    res = run_simulation(config)
    return res if keep else res.records[-1].test_acc


class Timer:
    def __enter__(self):
        self.t = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t


def test_c01_gradient_oracle(report_line):
    with Timer() as t:
        rng = np.random.default_rng(2024)
        worst_p = worst_x = 0.0
        for _ in range(12):
            depth = int(rng.integers(1, 3))
            sizes = (int(rng.integers(2, 8)),) + tuple(int(rng.integers(2, 8)) for _ in range(depth)) + (int(rng.integers(2, 6)),)
            spec = nn.ModelSpec(sizes)
            w = nn.init_params(spec, rng)
            X = rng.uniform(0, 1, size=(6, sizes[0]))
            y = rng.integers(0, sizes[-1], size=6)
            _, g = nn.loss_and_param_grad(w, spec, X, y)
            worst_p = max(worst_p, max_rel_error(g, central_diff(lambda v: reference_loss(v, sizes, X, y), w)))
            G = nn.loss_input_grad(w, spec, X, y)
            for i in range(len(y)):
                fd = central_diff(lambda x: reference_loss(w, sizes, x[None, :], y[i:i + 1]), X[i])
                worst_x = max(worst_x, max_rel_error(G[i], fd))
    ok = worst_p < 1e-4 and worst_x < 1e-4
    record(report_line, 1, "gradient oracle", ok,
           f"12 instances, worst relative error params {worst_p:.1e}, inputs {worst_x:.1e} (tol 1e-4)", t.seconds, 10)


def test_c02_variance_identity(report_line):
    with Timer() as t:
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            k, d = int(rng.integers(1, 11)), int(rng.integers(1, 51))
            G = rng.normal(size=(k, d)) * rng.uniform(0.01, 100)
            p = rng.dirichlet(np.ones(k))
            lhs, rhs, gap = variance_identity_check(G, p)
            worst = max(worst, gap / abs(lhs))
    record(report_line, 2, "weighted variance identity", worst < 1e-10,
           f"100 instances, worst relative gap {worst:.1e} (tol 1e-10)", t.seconds, 1)


def test_c03_valuation_pipeline(report_line):
    with Timer() as t:
        checks = {
            "minmax [2,4,6]": np.array_equal(minmax_normalize([2, 4, 6]), [0, 0.5, 1]),
            "minmax equal": np.array_equal(minmax_normalize([5, 5]), [1, 1]),
            "minmax single": np.array_equal(minmax_normalize([7]), [1]),
            "smooth 0.65": smooth_update(0.5, 1.0, 0.3) == 0.65,
            "smooth absent": smooth_update(0.5, 1.0, 0.3, participated=False) == 0.5,
            "smooth cold": smooth_update(0.0, 1.0, 0.3) == 0.3,
            "weights [1,1,2]": np.array_equal(aggregation_weights([1, 1, 2]), [0.25, 0.25, 0.5]),
            "weights zero": np.array_equal(aggregation_weights([0, 0]), [0.5, 0.5]),
            "weights [0,3]": np.array_equal(aggregation_weights([0, 3]), [0, 1]),
        }
        rng = np.random.default_rng(3)
        for i in range(50):
            phi = rng.normal(size=int(rng.integers(2, 10)))
            psi = minmax_normalize(phi)
            checks[f"bounds {i}"] = psi.min() == 0.0 and psi.max() == 1.0
            # powers of two keep the affine map exact in floating point
            checks[f"affine {i}"] = np.array_equal(minmax_normalize(4.0 * phi + 0.5), psi) or \
                np.allclose(minmax_normalize(4.0 * phi + 0.5), psi, rtol=0, atol=1e-15)
            omega = rng.uniform(0, 1, size=psi.size)
            p = aggregation_weights(omega)
            checks[f"sum {i}"] = abs(p.sum() - 1.0) <= 1e-15 and np.all(p >= 0)
            checks[f"order {i}"] = np.array_equal(np.argsort(p, kind="stable"), np.argsort(omega, kind="stable"))
            checks[f"scale {i}"] = np.array_equal(aggregation_weights(8.0 * omega), p)
    failed = [k for k, v in checks.items() if not v]
    record(report_line, 3, "valuation pipeline", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} exact checks" + (f", failed {failed[:5]}" if failed else ""),
           t.seconds, 1)


def test_c04_shapley_oracle(report_line):
    with Timer() as t:
        rng = np.random.default_rng(11)
        spec = nn.ModelSpec((3, 4, 3))
        X = rng.uniform(0, 1, size=(50, 3))
        y = rng.integers(0, 3, size=50)
        worst = 0.0
        for m in (2, 3, 4):
            prev = nn.init_params(spec, rng)
            models = np.stack([prev + rng.normal(size=prev.size) for _ in range(m)])

            def value(S):
                w = prev if not S else models[sorted(S)].mean(axis=0)
                return float(np.mean(np.argmax(nn.forward(w, spec, X), axis=1) == y))

            got = mc_shapley_scores(models, prev, spec, X, y, all_permutations=True)
            worst = max(worst, float(np.max(np.abs(got - brute_force_shapley(value, m)))))
    record(report_line, 4, "exhaustive Shapley vs subsets", worst <= 1e-12,
           f"|S| in {{2,3,4}}, max abs difference {worst:.1e} (tol 1e-12)", t.seconds, 30)


@pytest.fixture(scope="module")
def clean_runs():
    t = time.perf_counter()
    acc = {a: np.array([desk_final_acc([f"aggregator={a}"], s) for s in SEEDS]) for a in ("fedavg", "fedif")}
    return acc, time.perf_counter() - t


@pytest.fixture(scope="module")
def label_noise_runs():
    t = time.perf_counter()
    acc = {a: np.array([desk_final_acc(LN + [f"aggregator={a}"], s) for s in SEEDS]) for a in ("fedavg", "fedif")}
    return acc, time.perf_counter() - t


@pytest.fixture(scope="module")
def gradient_noise_runs():
    t = time.perf_counter()
    out = {"fedavg": [], "fedif": [], "noise": []}
    for s in SEEDS:
        out["fedavg"].append(desk_final_acc(GN + ["aggregator=fedavg"], s))
        res = desk_final_acc(GN + ["aggregator=fedif"], s, keep=True)
        out["fedif"].append(res.records[-1].test_acc)
        out["noise"].append(noise_term_report(res.records))
    out["fedavg"], out["fedif"] = np.array(out["fedavg"]), np.array(out["fedif"])
    return out, time.perf_counter() - t


def pct(a):
    return " ".join(f"{100 * v:.1f}" for v in a)


def test_c05_clean_parity(report_line, clean_runs):
    acc, seconds = clean_runs
    gap = 100 * (acc["fedif"].mean() - acc["fedavg"].mean())
    record(report_line, 5, "clean parity", abs(gap) <= 2.0,
           f"FedIF {100 * acc['fedif'].mean():.2f} vs FedAvg {100 * acc['fedavg'].mean():.2f}, "
           f"gap {gap:+.2f} pts (limit 2)", seconds, 600)


def test_c06_label_noise_ordering(report_line, label_noise_runs):
    acc, seconds = label_noise_runs
    wins = int(np.sum(acc["fedif"] >= acc["fedavg"]))
    gap = 100 * (acc["fedif"].mean() - acc["fedavg"].mean())
    record(report_line, 6, "label-noise ordering", wins >= 4 and gap > 0,
           f"FedIF [{pct(acc['fedif'])}] vs FedAvg [{pct(acc['fedavg'])}], "
           f"FedIF >= FedAvg in {wins}/5 seeds, mean gap {gap:+.2f} pts", seconds, 900)


def test_c07_gradient_noise_ordering(report_line, gradient_noise_runs):
    out, seconds = gradient_noise_runs
    gap = 100 * (out["fedif"].mean() - out["fedavg"].mean())
    record(report_line, 7, "gradient-noise ordering", gap >= 3.0,
           f"FedIF [{pct(out['fedif'])}] vs FedAvg [{pct(out['fedavg'])}], mean gap {gap:+.2f} pts (need >= 3)",
           seconds, 900)


def test_c08_noise_term(report_line, gradient_noise_runs):
    out, seconds = gradient_noise_runs
    reps = out["noise"]
    hits = sum(r.median_weighted <= r.median_uniform for r in reps)
    detail = ", ".join(f"{r.median_weighted:.3g}<={r.median_uniform:.3g}" for r in reps)
    record(report_line, 8, "noise-term diagnostic", hits >= 4 and all(r.n_noisy_rounds for r in reps),
           f"median weighted vs uniform per seed [{detail}], holds in {hits}/5 seeds", seconds, 900)


def test_c09_efficiency(report_line):
    with Timer() as t:
        report = cli.bench_aggregation(BENCH, [], seeds=[0, 1, 2], permutations=[8])
    by = {r["method"]: r for r in report["rows"]}
    ratio = by["mc_shapley"]["agg_time_mean"] / by["fedif"]["agg_time_mean"]
    record(report_line, 9, "aggregation efficiency", ratio >= 10,
           f"mean aggregation time FedIF {1e3 * by['fedif']['agg_time_mean']:.3f} ms, "
           f"MC-Shapley(P=8) {1e3 * by['mc_shapley']['agg_time_mean']:.3f} ms, ratio {ratio:.1f}x (need >= 10)",
           t.seconds, 600)


def test_c10_pgd_constraints(report_line):
    with Timer() as t:
        config, _, _ = load_config(DESK)
        sim = Simulation(config)
        X, y = sim.train.features, sim.train.labels
        w, _ = local_training(sim.params, sim.spec, X, y, 3, 16, 0.01, 0.9, np.random.default_rng(0))
        worst_dev, outside, loss_ok = 0.0, 0, True
        for seed in range(5):
            idx = np.random.default_rng(seed).choice(len(y), 256, replace=False)
            adv = pgd_attack(w, sim.spec, X[idx], y[idx], PGDConfig(0.03, 0.01, 20), seed)
            worst_dev = max(worst_dev, float(np.max(np.abs(adv - X[idx]))))
            outside += int(np.sum((adv < 0) | (adv > 1)))
            clean, _ = nn.loss_and_param_grad(w, sim.spec, X[idx], y[idx])
            attacked, _ = nn.loss_and_param_grad(w, sim.spec, adv, y[idx])
            loss_ok &= attacked >= clean
    ok = worst_dev <= 0.03 + 1e-12 and outside == 0 and loss_ok
    record(report_line, 10, "PGD constraints", ok,
           f"max |x_adv - x| {worst_dev:.6f} (eps 0.03), {outside} coordinates outside [0,1], "
           f"adversarial loss >= clean loss: {loss_ok}", t.seconds, 60)


def test_c11_determinism(report_line, tmp_path):
    import csv
    with Timer() as t:
        args = ["--config", str(DESK), "--quiet", "--override", "aggregator=fedif"] + sum((["--override", o] for o in GN), [])
        for name in ("a", "b"):
            assert cli.main(["run", "--out-dir", str(tmp_path / name)] + args) == 0
        cols = deterministic_columns()
        tables = []
        for name in ("a", "b"):
            with open(tmp_path / name / "rounds.csv", newline="") as fh:
                tables.append([[row[c] for c in cols] for row in csv.DictReader(fh)])
    ok = tables[0] == tables[1] and len(tables[0]) == 30
    record(report_line, 11, "determinism", ok,
           f"two runs, {len(tables[0])} rows x {len(cols)} deterministic columns identical: {tables[0] == tables[1]}",
           t.seconds, 300)


def test_c12_weight_norm_ablation(report_line, gradient_noise_runs):
    out, seconds = gradient_noise_runs
    with Timer() as t:
        off = np.array([desk_final_acc(GN + ["aggregator=fedif", "fedif.wn=false"], s) for s in SEEDS])
    worse = int(np.sum(off < out["fedif"]))
    record(report_line, 12, "weight-normalization ablation", worse >= 4,
           f"full FedIF [{pct(out['fedif'])}] vs WN off [{pct(off)}], WN off worse in {worse}/5 seeds",
           seconds + t.seconds, 1200)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
