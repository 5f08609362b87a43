"""Compare the compiled training kernel against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 784,64,10] [--samples 64] [--repeat 5]

Times one client's local training (E epochs of mini-batch SGD with momentum)
and the validation-gradient pass, per backend, and checks both backends agree.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from fedif import kernels, nn


def time_call(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        tic = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - tic)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="784,64,10")
    ap.add_argument("--samples", type=int, default=64, help="client training examples")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--val", type=int, default=2000, help="validation examples for the gradient pass")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    sizes = tuple(int(s) for s in args.sizes.split(","))
    spec = nn.ModelSpec(sizes)
    rng = np.random.default_rng(0)
    w = nn.init_params(spec, rng)
    X = rng.uniform(0, 1, size=(args.samples, sizes[0]))
    y = rng.integers(0, sizes[-1], size=args.samples)
    Xv = rng.uniform(0, 1, size=(args.val, sizes[0]))
    yv = rng.integers(0, sizes[-1], size=args.val)
    order = np.stack([rng.permutation(args.samples) for _ in range(args.epochs)])
    steps = args.epochs * -(-args.samples // args.batch_size)

    backends = kernels.available()
    print(f"layers {sizes}, {spec.n_params} params, {steps} SGD steps per client, backends {backends}")
    results = {}
    for name in backends:
        k = kernels.get(name)
        train = lambda: k.train_epochs(w, sizes, X, y, order, args.batch_size, 0.01, 0.9)
        grad = lambda: k.loss_grad(w, sizes, Xv, yv)
        results[name] = (train(), grad())
        t_train = time_call(train, args.repeat)
        t_grad = time_call(grad, args.repeat)
        print(f"{name:>9}: local training {t_train * 1e3:8.3f} ms ({t_train / steps * 1e6:6.1f} us/step)   "
              f"validation gradient {t_grad * 1e3:8.3f} ms")
    if len(results) == 2:
        (wa, _), (la, ga) = results["compiled"]
        (wb, _), (lb, gb) = results["python"]
        print(f"max |difference|: trained params {np.max(np.abs(wa - wb)):.2e}, "
              f"val gradient {np.max(np.abs(ga - gb)):.2e}, loss {abs(la - lb):.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
