"""``fedif`` command line: run, sweep, bench-aggregation, verify.

Exit codes: 0 success, 1 a verification check failed, 2 invalid
configuration or sweep spec, 3 dataset files missing.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, io, kernels
from .config import SWEEP_KEYS, config_hash, load_config, to_tree
from .errors import ConfigError, DatasetMissingError, FedIFError
from .simulation import Simulation

log = logging.getLogger("fedif")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DATASET = 0, 1, 2, 3
ARTIFACT_VERSION = 1


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"`` or ``"0-4"`` (inclusive) or a mix: ``"0-2,7"``."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    return seeds


def _split_list(text: str | None) -> list[str] | None:
    return [t.strip() for t in text.split(",") if t.strip()] if text else None


# -- run ------------------------------------------------------------------

def execute_run(config, flat, raw: bytes, out_dir: Path, config_path=None, overrides=(),
                checkpoints: bool = False, quiet: bool = True) -> dict:
    """Run one simulation and write manifest, rounds.csv, summary.json; returns the summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "manifest": "manifest.json",
        "rounds_csv": "rounds.csv",
        "rounds_schema": "rounds.schema.json",
        "summary": "summary.json",
    }
    if checkpoints:
        outputs["checkpoints"] = "checkpoints"
    # loading data happens before the manifest so a missing dataset leaves no half-written run
    sim = Simulation(config, checkpoint_dir=out_dir / "checkpoints" if checkpoints else None)
    manifest = {
        "artifact_version": ARTIFACT_VERSION,
        "package_version": __version__,
        "started_at": datetime.now(timezone.utc).isoformat(),
        "config_file": str(config_path) if config_path else None,
        "config_sha256": config_hash(raw),
        "overrides": list(overrides),
        "config": to_tree(config),
        "kernel_backend": kernels.BACKEND,
        "outputs": outputs,
    }
    io.write_json(out_dir / outputs["manifest"], manifest)
    io.write_json(out_dir / outputs["rounds_schema"], io.schema())
    writer = io.RoundsWriter(out_dir / outputs["rounds_csv"])

    def on_round(rec):
        writer(rec)
        if not quiet:
            print(f"round {rec.round:4d}  test_acc {rec.test_acc:.4f}  val_acc {rec.val_acc:.4f}  "
                  f"agg {rec.agg_time * 1e3:.2f} ms", flush=True)

    try:
        result = sim.run(on_round=on_round)
    finally:
        writer.close()
    summary = io.summarize(result)
    io.write_json(out_dir / outputs["summary"], summary)
    return summary


def _load(args, extra=()):
    overrides = list(args.override or []) + list(extra)
    config, flat, raw = load_config(args.config, overrides)
    return config, flat, raw, overrides


def cmd_run(args) -> int:
    out = Path(args.out_dir)
    seeds = parse_seeds(args.seeds) if args.seeds else [None]
    for seed in seeds:
        extra = [f"seed={seed}"] if seed is not None else []
        config, flat, raw, overrides = _load(args, extra)
        run_dir = out / f"seed_{seed}" if len(seeds) > 1 else out
        summary = execute_run(config, flat, raw, run_dir, args.config, overrides, args.checkpoints, args.quiet)
        print(f"seed {config.seed}: final test acc {summary['final_test_acc']:.4f} -> {run_dir}")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------

def _sweep_axes(args, flat) -> dict[str, list]:
    axes = {k: flat.get(f"sweep.{k}") for k in SWEEP_KEYS}
    if args.seeds:
        axes["seeds"] = parse_seeds(args.seeds)
    for key in ("aggregators", "attacks"):
        value = _split_list(getattr(args, key))
        if value:
            axes[key] = value
    if args.gammas:
        axes["gammas"] = [float(g) for g in _split_list(args.gammas)]
    for key, value in axes.items():
        if value is not None and not isinstance(value, list):
            raise ConfigError(f"sweep.{key}: expected a list", f"sweep.{key}")
    return axes


def _sweep_job(job):
    config_path, overrides, out_dir = job
    config, flat, raw = load_config(config_path, overrides)
    return execute_run(config, flat, raw, Path(out_dir), config_path, overrides)


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    return statistics.fmean(values), statistics.stdev(values) if len(values) > 1 else 0.0


SWEEP_COLUMNS = ("aggregator", "attack", "gamma", "n_seeds", "final_test_acc_mean", "final_test_acc_std",
                 "best_test_acc_mean", "best_test_acc_std", "final_val_acc_mean", "final_val_acc_std",
                 "train_time_mean", "agg_time_mean")


def cmd_sweep(args) -> int:
    _, flat, _, base_overrides = _load(args)
    axes = _sweep_axes(args, flat)
    if all(not v for v in axes.values()):
        print("error: empty sweep spec; give seeds, aggregators, attacks or gammas "
              "([sweep] section or command-line flags)", file=sys.stderr)
        return EXIT_CONFIG
    seeds = axes["seeds"] or [None]
    aggs = axes["aggregators"] or [None]
    attacks = axes["attacks"] or [None]
    gammas = axes["gammas"] or [None]
    out = Path(args.out_dir)
    cells, jobs = [], []
    for agg, attack, gamma in itertools.product(aggs, attacks, gammas):
        extra = []
        if agg is not None:
            extra.append(f"aggregator={json.dumps(agg)}")
        if attack is not None:
            extra.append(f"attack.kind={json.dumps(attack)}")
        if gamma is not None:
            extra.append(f"fedif.gamma={gamma}")
        # validate the cell up front so a bad axis value fails before any training
        cell_cfg, _, _ = load_config(args.config, base_overrides + extra)
        name = f"{cell_cfg.aggregation.name}__{cell_cfg.attack.kind}__g{cell_cfg.aggregation.gamma:g}"
        runs = []
        for seed in seeds:
            ov = base_overrides + extra + ([f"seed={seed}"] if seed is not None else [])
            run_dir = out / "runs" / name / f"seed_{seed if seed is not None else cell_cfg.seed}"
            runs.append(len(jobs))
            jobs.append((args.config, ov, str(run_dir)))
        cells.append((cell_cfg, runs))
    print(f"sweep: {len(cells)} cells x {len(seeds)} seeds = {len(jobs)} runs")
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            summaries = list(pool.map(_sweep_job, jobs))
    else:
        summaries = [_sweep_job(j) for j in jobs]
    rows = []
    for cell_cfg, run_ids in cells:
        s = [summaries[i] for i in run_ids]
        row = {
            "aggregator": cell_cfg.aggregation.name,
            "attack": cell_cfg.attack.kind,
            "gamma": cell_cfg.aggregation.gamma,
            "n_seeds": len(s),
        }
        for key in ("final_test_acc", "best_test_acc", "final_val_acc"):
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std([x[key] for x in s])
        row["train_time_mean"] = _mean_std([x["mean_train_time"] for x in s])[0]
        row["agg_time_mean"] = _mean_std([x["mean_agg_time"] for x in s])[0]
        rows.append(row)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    io.write_json(out / "sweep.json", {"axes": axes, "rows": rows})
    for r in rows:
        print(f"{r['aggregator']:>10} {r['attack']:>14} gamma={r['gamma']:<4g} "
              f"acc {100 * r['final_test_acc_mean']:.2f} +- {100 * r['final_test_acc_std']:.2f}  (n={r['n_seeds']})")
    return EXIT_OK


# -- bench-aggregation ------------------------------------------------------

BENCH_COLUMNS = ("method", "permutations", "seeds", "train_time_mean", "agg_time_mean", "final_test_acc_mean")


def bench_aggregation(config_path, overrides, seeds, permutations, out_dir: Path | None = None) -> dict:
    """Matched runs of each aggregator; mean per-round training and aggregation wall time."""
    methods = [("fedavg", None), ("fedif", None), ("krum", None)] + [("mc_shapley", p) for p in permutations]
    rows = []
    for method, perms in methods:
        train, agg, acc = [], [], []
        for seed in seeds:
            extra = [f'aggregator="{method}"', f"seed={seed}"]
            if perms is not None:
                extra.append(f"mc_shapley.permutations={perms}")
            config, flat, raw = load_config(config_path, list(overrides) + extra)
            if out_dir is not None:
                tag = method if perms is None else f"{method}_P{perms}"
                summary = execute_run(config, flat, raw, out_dir / "runs" / tag / f"seed_{seed}", config_path,
                                      list(overrides) + extra)
            else:
                summary = io.summarize(Simulation(config).run())
            train.append(summary["mean_train_time"])
            agg.append(summary["mean_agg_time"])
            acc.append(summary["final_test_acc"])
        rows.append({
            "method": method,
            "permutations": perms,
            "seeds": len(seeds),
            "train_time_mean": statistics.fmean(train),
            "agg_time_mean": statistics.fmean(agg),
            "final_test_acc_mean": statistics.fmean(acc),
        })
    fedif = next(r for r in rows if r["method"] == "fedif")["agg_time_mean"]
    ratios = {f"mc_shapley_P{r['permutations']}": r["agg_time_mean"] / fedif
              for r in rows if r["method"] == "mc_shapley"}
    return {"rows": rows, "agg_time_ratio_vs_fedif": ratios}


def cmd_bench(args) -> int:
    _, flat, _, overrides = _load(args)
    seeds = parse_seeds(args.seeds) if args.seeds else [int(flat.get("seed", 0))]
    perms = [int(p) for p in _split_list(args.permutations)]
    out = Path(args.out_dir)
    report = bench_aggregation(args.config, overrides, seeds, perms, out)
    report["kernel_backend"] = kernels.BACKEND
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(report["rows"])
    io.write_json(out / "bench.json", report)
    print(f"{'method':>12} {'P':>3} {'train s/round':>14} {'agg s/round':>12} {'test acc':>9}")
    for r in report["rows"]:
        print(f"{r['method']:>12} {r['permutations'] or '':>3} {r['train_time_mean']:14.5f} "
              f"{r['agg_time_mean']:12.6f} {r['final_test_acc_mean']:9.4f}")
    for name, ratio in report["agg_time_ratio_vs_fedif"].items():
        print(f"aggregation time {name} / fedif = {ratio:.1f}x")
    return EXIT_OK


# -- verify ---------------------------------------------------------------

def cmd_verify(args) -> int:
    from .theory import noise_term_report
    from .verify import run_all

    results = run_all(seed=args.seed)
    ok = True
    for r in results:
        print(r.line())
        ok &= r.passed
    for run_dir in args.run_dir or []:
        rows = io.read_rounds_csv(Path(run_dir) / "rounds.csv")
        report = noise_term_report(rows)
        if not report.n_noisy_rounds:
            print(f"SKIP  noise term {run_dir}: no noisy rounds recorded")
            continue
        passed = report.median_weighted <= report.median_uniform
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  noise term {run_dir}: median weighted "
              f"{report.median_weighted:.4g} vs uniform {report.median_uniform:.4g} "
              f"({report.n_noisy_rounds} noisy rounds)")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# -- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedif", description="Federated learning simulator with influence-weighted aggregation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="TOML config file (defaults apply to missing keys)")
        p.add_argument("--override", action="append", metavar="KEY=VALUE",
                       help="set a config key, e.g. fedif.gamma=0.4 (repeatable; wins over the file)")
        p.add_argument("--out-dir", default=out_default, help=f"output directory (default {out_default})")
        p.add_argument("--seeds", help="seed list: 0,1,2 or 0-4")

    p = sub.add_parser("run", help="run one simulation")
    common(p, "runs/run")
    p.add_argument("--checkpoints", action="store_true", help="save the global model after every round")
    p.add_argument("--quiet", action="store_true", help="no per-round progress lines")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="seeds x aggregators x attacks x gamma grid, mean +- std per cell")
    common(p, "runs/sweep")
    p.add_argument("--aggregators", help="comma list, e.g. fedavg,fedif")
    p.add_argument("--attacks", help="comma list of attack kinds; parameters come from [attack]")
    p.add_argument("--gammas", help="comma list of smoothing rates")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench-aggregation", help="training and aggregation wall time per aggregator")
    common(p, "runs/bench")
    p.add_argument("--permutations", default="2,8", help="Shapley permutation counts to time (default 2,8)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="numeric self-checks (identities, gradients, Shapley oracle)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-dir", action="append", help="also check the noise term of a gradient-noise run")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        field = f" [field: {exc.field}]" if getattr(exc, "field", None) else ""
        print(f"error: invalid configuration: {exc}{field}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetMissingError as exc:
        print(f"error: dataset not found: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except FedIFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
