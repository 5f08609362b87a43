"""The federated training loop: client sampling, local training, attacks,
valuation, aggregation, evaluation and timing.

A run is a pure function of its :class:`~fedif.config.SimConfig`: all
randomness comes from named streams keyed by (seed, purpose, client, round).
"""
from __future__ import annotations

import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import adversary, aggregation, kernels, nn, valuation
from .config import SimConfig
from .conv import ConvSpec
from .data import Dataset, dirichlet_partition, load_cifar10, load_idx, split_validation, synth_blobs
from .errors import ConfigError, DatasetMissingError, NumericError
from .rng import stream

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FPV1"
CHECKPOINT_VERSION = 1


@dataclass
class ClientState:
    id: int
    indices: np.ndarray
    labels: np.ndarray
    noisy_fraction: float = 0.0
    noisy_samples: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def noisy(self) -> bool:
        return self.noisy_fraction > 0.0 or len(self.noisy_samples) > 0


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    phi: dict[int, float] = field(default_factory=dict)
    psi: dict[int, float] = field(default_factory=dict)
    omega: dict[int, float] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)
    raw_influence: dict[int, float] = field(default_factory=dict)
    delta_norm: dict[int, float] = field(default_factory=dict)
    omega_all: list[float] = field(default_factory=list)
    selected: int | None = None
    val_acc: float = float("nan")
    test_acc: float = float("nan")
    train_loss: float = float("nan")
    train_time: float = 0.0
    agg_time: float = 0.0


@dataclass
class RoundHistory:
    """What a replay needs: the round-start global model and every uploaded model."""

    round: int
    global_before: np.ndarray
    uploads: dict[int, np.ndarray]


@dataclass
class SimulationResult:
    config: SimConfig
    spec: nn.ModelSpec
    records: list[RoundRecord]
    params: np.ndarray
    assignment: adversary.AdversaryAssignment
    omega: np.ndarray
    history: list[RoundHistory] = field(default_factory=list)


def select_clients(n_clients: int, fraction: float, round_: int, seed: int) -> list[int]:
    """Sorted sample of ``max(floor(C*K), 1)`` distinct clients for one round."""
    m = max(int(fraction * n_clients), 1)
    chosen = stream(seed, "select", round_=round_).choice(n_clients, size=m, replace=False)
    return sorted(int(c) for c in chosen)


def local_training(start: np.ndarray, spec: nn.ModelSpec, X, y, epochs: int, batch_size: int,
                   lr: float, momentum: float, rng: np.random.Generator, prox_mu: float = 0.0,
                   pgd: adversary.PGDConfig | None = None, pgd_rows=None) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled mini-batch SGD with momentum; velocity starts at zero.

    The last partial batch of an epoch is kept. With ``pgd`` set, the rows of
    each batch listed in ``pgd_rows`` (indices into ``X``) are replaced by
    PGD examples crafted against the current local model before the gradient
    step. Returns the final parameters and per-epoch mean training loss.
    """
    n = len(y)
    if epochs == 0 or n == 0:
        return np.array(start, copy=True), np.zeros(0)
    order = np.stack([rng.permutation(n) for _ in range(epochs)])
    anchor = start if prox_mu else None
    use_pgd = pgd is not None and pgd_rows is not None and len(pgd_rows) > 0
    if not use_pgd and spec.conv is None:
        w, losses = kernels.impl.train_epochs(start, spec.layer_sizes, X, y, order, batch_size,
                                              lr, momentum, prox_mu, anchor)
    else:
        w, losses = _train_loop(start, spec, X, y, order, batch_size, lr, momentum, prox_mu,
                                pgd if use_pgd else None, pgd_rows, rng)
    if not np.all(np.isfinite(w)):
        raise NumericError("local training diverged (non-finite parameters); lower the learning rate")
    return w, losses


def _train_loop(start, spec, X, y, order, batch_size, lr, momentum, prox_mu, pgd, pgd_rows, rng):
    # same update as the training kernel, batch by batch, so PGD rows can be regenerated in between
    mask = np.zeros(len(y), dtype=bool)
    if pgd is not None:
        mask[pgd_rows] = True
    w = np.array(start, copy=True)
    state = nn.OptimizerState.fresh(len(w), lr, momentum)
    losses = np.zeros(order.shape[0])
    for e, perm in enumerate(order):
        total = 0.0
        for s in range(0, len(y), batch_size):
            idx = perm[s:s + batch_size]
            xb, yb = X[idx].copy(), y[idx]
            hit = mask[idx]
            if pgd is not None and hit.any():
                xb[hit] = adversary.pgd_attack(w, spec, xb[hit], yb[hit], pgd, rng)
            loss, g = nn.loss_and_param_grad(w, spec, xb, yb)
            if prox_mu:
                g = g + aggregation.local_prox_term(w, start, prox_mu)[1]
            w, state = nn.sgd_step(w, g, state)
            total += loss * len(idx)
        losses[e] = total / len(y)
    return w, losses


def load_datasets(config: SimConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for the configured dataset."""
    d = config.data
    if d.dataset == "synthetic":
        full = synth_blobs(d.n_classes, d.train_per_class + d.test_per_class, d.n_features,
                           d.spread, stream(config.seed, "synthetic"))
        n_train = d.n_classes * d.train_per_class
        train = full.subset(np.arange(n_train), "blobs-train")
        test = full.subset(np.arange(n_train, len(full)), "blobs-test")
    else:
        root = Path(d.path)
        if d.dataset == "fashion_mnist":
            def pick(stem):
                for name in (stem, stem + ".gz"):
                    if (root / name).exists():
                        return root / name
                raise DatasetMissingError(f"missing {root / stem}[.gz]")
            train = load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"), "fashion_mnist-train", 10)
            test = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"), "fashion_mnist-test", 10)
        else:
            base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
            train = load_cifar10([base / f"data_batch_{i}.bin" for i in range(1, 6)], "cifar10-train")
            test = load_cifar10([base / "test_batch.bin"], "cifar10-test")
    if d.train_subset and d.train_subset < len(train):
        keep = np.sort(stream(config.seed, "train_subset").choice(len(train), d.train_subset, replace=False))
        train = train.subset(keep)
    if d.test_subset and d.test_subset < len(test):
        keep = np.sort(stream(config.seed, "test_subset").choice(len(test), d.test_subset, replace=False))
        test = test.subset(keep)
    return train, test


def image_shape(config: SimConfig, n_features: int) -> tuple[int, int, int]:
    """(channels, height, width) of the configured dataset's flat rows."""
    if config.data.dataset == "fashion_mnist":
        return 1, 28, 28
    if config.data.dataset == "cifar10":
        return 3, 32, 32
    side = int(round(np.sqrt(n_features)))
    if side * side != n_features:
        raise ConfigError("model.conv_filters: synthetic features must form a square image "
                          f"(data.n_features={n_features})", "model.conv_filters")
    return 1, side, side


def save_params(path, params: np.ndarray) -> None:
    """Write a param vector: magic, uint32 version, uint64 length, float64 LE values."""
    params = np.asarray(params, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, params.size))
        fh.write(params.tobytes())


def load_params(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, n = struct.unpack_from("<IQ", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    body = raw[16:]
    if len(body) != 8 * n:
        raise ValueError(f"{path}: expected {n} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64)


class Simulation:
    """State of one federated run; call :meth:`run_round` repeatedly or :meth:`run`."""

    def __init__(self, config: SimConfig, datasets: tuple[Dataset, Dataset] | None = None,
                 keep_history: bool = False, checkpoint_dir=None):
        self.config = config
        seed = config.seed
        self.train, test = datasets if datasets is not None else load_datasets(config)
        split = split_validation(len(test), config.data.val_fraction, stream(seed, "validation"))
        self.val = test.subset(split.validation, "validation")
        self.test = test.subset(split.test, "test")
        conv = None
        if config.conv_filters:
            c, h, w = image_shape(config, self.train.n_features)
            conv = ConvSpec(c, h, w, config.conv_filters, config.conv_kernel)
        self.spec = nn.ModelSpec((self.train.n_features, *config.hidden, self.train.n_classes), conv=conv)
        self.params = nn.init_params(self.spec, stream(seed, "init"))
        partition = dirichlet_partition(self.train, config.clients, config.data.alpha_dir,
                                        stream(seed, "partition"), config.data.min_size)
        attack = config.attack
        self.assignment = adversary.assign_adversaries(config.clients, attack, stream(seed, "adversaries"))
        self.clients = []
        for cid, idx in enumerate(partition.indices):
            labels = self.train.labels[idx]
            frac = self.assignment.fractions.get(cid, 0.0)
            rows = np.zeros(0, dtype=np.int64)
            if frac and attack.kind == "label_noise":
                sample_rng = stream(seed, "noisy_samples", cid)
                rows = adversary.choose_noisy_samples(len(idx), frac, sample_rng)
                labels = adversary.flip_labels(labels, frac, self.train.n_classes, stream(seed, "noisy_samples", cid))
            elif frac and attack.kind == "adversarial":
                rows = adversary.choose_noisy_samples(len(idx), frac, stream(seed, "noisy_samples", cid))
            self.clients.append(ClientState(cid, idx, labels, frac, rows))
        agg = config.aggregation
        self.ledger = valuation.InfluenceLedger(config.clients, agg.gamma, agg.wn, agg.rn, agg.su)
        self.round = 0
        self.records: list[RoundRecord] = []
        self.keep_history = keep_history
        self.history: list[RoundHistory] = []
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        if self.checkpoint_dir:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            save_params(self.checkpoint_dir / "round_0000.pvec", self.params)

    # -- local work -------------------------------------------------------
    def _train_client(self, client: ClientState, t: int, start: np.ndarray):
        cfg = self.config
        X = self.train.features[client.indices]
        pgd_cfg = cfg.attack.pgd if cfg.attack.kind == "adversarial" and client.noisy else None
        prox = cfg.aggregation.prox_mu if cfg.aggregation.name == "fedprox" else 0.0
        tic = time.perf_counter()
        w, losses = local_training(start, self.spec, X, client.labels, cfg.local_epochs, cfg.batch_size,
                                   cfg.lr, cfg.momentum, stream(cfg.seed, "local", client.id, t),
                                   prox, pgd_cfg, client.noisy_samples if pgd_cfg else None)
        elapsed = time.perf_counter() - tic
        delta = None
        if cfg.attack.kind == "gradient_noise" and self.assignment.is_noisy(client.id):
            w, delta = adversary.perturb_update(w, cfg.attack.mu, cfg.attack.sigma,
                                                stream(cfg.seed, "update_noise", client.id, t))
        return w, delta, elapsed

    # -- one round ----------------------------------------------------------
    def run_round(self, t: int | None = None) -> tuple[np.ndarray, RoundRecord]:
        cfg = self.config
        agg = cfg.aggregation
        t = self.round + 1 if t is None else t
        ids = select_clients(cfg.clients, cfg.fraction, t, cfg.seed)
        active = []
        for cid in ids:
            if self.clients[cid].size == 0:
                log.warning("client %d has no data; skipped in round %d", cid, t)
            else:
                active.append(cid)
        start = self.params
        if cfg.workers > 1 and len(active) > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                results = list(pool.map(lambda c: self._train_client(self.clients[c], t, start), active))
        else:
            results = [self._train_client(self.clients[c], t, start) for c in active]
        uploads = np.stack([r[0] for r in results])
        rec = RoundRecord(round=t, participants=list(active))
        rec.train_time = float(np.mean([r[2] for r in results]))
        if cfg.attack.kind == "gradient_noise":
            rec.delta_norm = {c: float(np.linalg.norm(r[1])) if r[1] is not None else 0.0
                              for c, r in zip(active, results)}

        tic = time.perf_counter()
        if agg.name in ("fedavg", "fedprox"):
            sizes = [self.clients[c].size for c in active] if agg.fedavg_weighting == "size" else None
            new = aggregation.aggregate_fedavg(uploads, sizes)
            weights = (np.asarray(sizes, float) / sum(sizes)) if sizes else np.full(len(active), 1.0 / len(active))
        elif agg.name == "krum":
            f = agg.krum_f if agg.krum_f is not None else aggregation.default_krum_f(
                len(active), cfg.attack.n_level if cfg.attack.active else None)
            new, sel = aggregation.aggregate_krum(uploads, f)
            weights = np.zeros(len(active))
            weights[sel] = 1.0
            rec.selected = active[sel]
        elif agg.name == "fedif":
            g = valuation.validation_gradient(start, self.spec, self.val.features, self.val.labels)
            deltas = start - uploads
            phi = np.array([self.ledger.score(dw, g) for dw in deltas])
            psi, omega, weights = self.ledger.update(active, phi)
            new = aggregation.aggregate_weighted(uploads, weights)
            raw = deltas @ g
        else:  # mc_shapley
            phi = valuation.mc_shapley_scores(uploads, start, self.spec, self.val.features, self.val.labels,
                                              agg.shapley_permutations, stream(cfg.seed, "shapley", round_=t))
            psi, omega, weights = self.ledger.update(active, phi)
            new = aggregation.aggregate_weighted(uploads, weights)
        rec.agg_time = time.perf_counter() - tic

        rec.weights = {c: float(w) for c, w in zip(active, weights)}
        if agg.uses_valuation:
            rec.phi = {c: float(v) for c, v in zip(active, phi)}
            rec.psi = {c: float(v) for c, v in zip(active, psi)}
            rec.omega = {c: float(v) for c, v in zip(active, omega)}
            rec.omega_all = [float(v) for v in self.ledger.omega]
        if agg.name == "fedif":
            rec.raw_influence = {c: float(v) for c, v in zip(active, raw)}

        if self.keep_history:
            self.history.append(RoundHistory(t, start.copy(), {c: u.copy() for c, u in zip(active, uploads)}))
        self.params = new
        self.round = t
        rec.val_acc = nn.accuracy(new, self.spec, self.val.features, self.val.labels) if len(self.val) else float("nan")
        rec.test_acc = nn.accuracy(new, self.spec, self.test.features, self.test.labels)
        if cfg.eval_train_loss:
            rec.train_loss = nn.mean_loss(new, self.spec, self.train.features, self.train.labels)
        if self.checkpoint_dir:
            save_params(self.checkpoint_dir / f"round_{t:04d}.pvec", new)
        self.records.append(rec)
        return new, rec

    def run(self, rounds: int | None = None, on_round=None) -> SimulationResult:
        for _ in range(rounds if rounds is not None else self.config.rounds):
            _, rec = self.run_round()
            if on_round is not None:
                on_round(rec)
        return SimulationResult(self.config, self.spec, self.records, self.params, self.assignment,
                                self.ledger.omega.copy(), self.history)


def run_simulation(config: SimConfig, datasets=None, keep_history: bool = False, checkpoint_dir=None,
                   on_round=None) -> SimulationResult:
    """Run all ``config.rounds`` rounds and return the records and final model."""
    sim = Simulation(config, datasets, keep_history=keep_history, checkpoint_dir=checkpoint_dir)
    return sim.run(on_round=on_round)


def cumulative_influences(records) -> dict[int, float]:
    """Per-client sum of unnormalized round influence over the rounds it took part in."""
    total: dict[int, float] = {}
    for rec in records:
        for c, v in rec.raw_influence.items():
            total[c] = total.get(c, 0.0) + v
    return dict(sorted(total.items()))
