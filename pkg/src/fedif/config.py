"""Simulation configuration: dataclasses plus TOML loading and ``key=value`` overrides.

File layout (every field optional; defaults are the reference hyperparameters)::

    seed = 0
    clients = 100          # K
    fraction = 0.1         # C
    local_epochs = 5       # E
    batch_size = 16        # B
    rounds = 100           # T
    lr = 0.001
    momentum = 0.9
    aggregator = "fedif"   # fedavg | fedif | krum | mc_shapley | fedprox

    [data]      dataset, path, alpha_dir, min_size, val_fraction, synthetic sizes
    [model]     hidden = [64], conv_filters = 0 (>0 adds one 3x3 conv layer), conv_kernel
    [attack]    kind, n_level, n_ratio, sigma, mu
    [attack.pgd] eps, step, iters
    [fedif]     gamma, wn, rn, su
    [fedavg]    weighting = "uniform" | "size"
    [fedprox]   mu
    [krum]      f
    [mc_shapley] permutations
    [sweep]     seeds, aggregators, attacks, gammas
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .adversary import AttackConfig, PGDConfig
from .aggregation import AggregatorKind
from .errors import AggregationError, AttackError, ConfigError

DATASETS = ("synthetic", "fashion_mnist", "cifar10")


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "synthetic"
    path: str = "data"
    alpha_dir: float = 1.0
    min_size: int = 5
    val_fraction: float = 0.2
    train_subset: int = 0
    test_subset: int = 0
    # synthetic blobs
    n_classes: int = 10
    n_features: int = 64
    train_per_class: int = 200
    test_per_class: int = 100
    spread: float = 0.25


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    clients: int = 100
    fraction: float = 0.1
    local_epochs: int = 5
    batch_size: int = 16
    rounds: int = 100
    lr: float = 0.001
    momentum: float = 0.9
    workers: int = 1
    eval_train_loss: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    hidden: tuple[int, ...] = (64,)
    conv_filters: int = 0  # 0 = plain MLP
    conv_kernel: int = 3
    attack: AttackConfig = field(default_factory=AttackConfig)
    aggregation: AggregatorKind = field(default_factory=AggregatorKind)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [
            (self.clients >= 1, "clients", "must be >= 1"),
            (0.0 < self.fraction <= 1.0, "fraction", "must lie in (0, 1]"),
            (self.local_epochs >= 0, "local_epochs", "must be >= 0"),
            (self.batch_size >= 1, "batch_size", "must be >= 1"),
            (self.rounds >= 1, "rounds", "must be >= 1"),
            (self.lr > 0, "lr", "must be > 0"),
            (0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)"),
            (self.workers >= 1, "workers", "must be >= 1"),
            (len(self.hidden) >= 1 and min(self.hidden) >= 1, "model.hidden", "needs at least one positive hidden size"),
            (self.conv_filters >= 0, "model.conv_filters", "must be >= 0"),
            (self.conv_kernel >= 1, "model.conv_kernel", "must be >= 1"),
            (self.data.dataset in DATASETS, "data.dataset", f"must be one of {DATASETS}"),
            (self.data.alpha_dir > 0, "data.alpha_dir", "must be > 0"),
            (0.0 <= self.data.val_fraction < 1.0, "data.val_fraction", "must lie in [0, 1)"),
            (self.data.min_size >= 1, "data.min_size", "must be >= 1"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(f"{name}: {msg}", name)
        if self.aggregation.uses_valuation and self.data.val_fraction == 0.0:
            raise ConfigError(
                "data.val_fraction: influence and Shapley aggregation need a validation split",
                "data.val_fraction",
            )

    @property
    def participants_per_round(self) -> int:
        return max(int(self.fraction * self.clients), 1)

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


# Maps "section.key" (or a bare top-level key) to (target, attribute).
_TOP = {f.name for f in dataclasses.fields(SimConfig)} - {"data", "hidden", "conv_filters", "conv_kernel",
                                                         "attack", "aggregation"}
_KEYS: dict[str, tuple[str, str]] = {k: ("sim", k) for k in _TOP}
_KEYS.update({f"data.{f.name}": ("data", f.name) for f in dataclasses.fields(DataConfig)})
_KEYS.update({
    "model.hidden": ("sim", "hidden"),
    "model.conv_filters": ("sim", "conv_filters"),
    "model.conv_kernel": ("sim", "conv_kernel"),
    "aggregator": ("agg", "name"),
    "attack.kind": ("attack", "kind"),
    "attack.n_level": ("attack", "n_level"),
    "attack.n_ratio": ("attack", "n_ratio"),
    "attack.sigma": ("attack", "sigma"),
    "attack.mu": ("attack", "mu"),
    "attack.pgd.eps": ("pgd", "eps"),
    "attack.pgd.step": ("pgd", "step"),
    "attack.pgd.iters": ("pgd", "iters"),
    "fedif.gamma": ("agg", "gamma"),
    "fedif.wn": ("agg", "wn"),
    "fedif.rn": ("agg", "rn"),
    "fedif.su": ("agg", "su"),
    "fedavg.weighting": ("agg", "fedavg_weighting"),
    "fedprox.mu": ("agg", "prox_mu"),
    "krum.f": ("agg", "krum_f"),
    "mc_shapley.permutations": ("agg", "shapley_permutations"),
})
SWEEP_KEYS = ("seeds", "aggregators", "attacks", "gammas")
CONFIG_KEYS = tuple(sorted(_KEYS))


def flatten_tree(tree: dict, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_tree(value, name + "."))
        else:
            flat[name] = value
    return flat


def parse_override(text: str) -> tuple[str, Any]:
    """``"fedif.gamma=0.3"`` -> ``("fedif.gamma", 0.3)``; bare words become strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}", name)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not (isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigError(f"{name}: expected an integer, got {value!r}", name)
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}", name)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}", name)
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}", name)
        return tuple(value)
    return value


_DEFAULTS = {
    "sim": SimConfig(),
    "data": DataConfig(),
    "attack": AttackConfig(),
    "pgd": PGDConfig(),
    "agg": AggregatorKind(),
}


def build_config(flat: dict[str, Any]) -> SimConfig:
    """Build a validated SimConfig from flat ``section.key`` values."""
    groups: dict[str, dict[str, Any]] = {g: {} for g in _DEFAULTS}
    for name, value in flat.items():
        if name.startswith("sweep."):
            continue
        if name not in _KEYS:
            raise ConfigError(f"unknown configuration key {name!r}", name)
        group, attr = _KEYS[name]
        default = getattr(_DEFAULTS[group], attr)
        if attr == "krum_f":
            if value is not None and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{name}: expected an integer, got {value!r}", name)
            groups[group][attr] = value
            continue
        groups[group][attr] = _coerce(name, value, default)
    try:
        pgd = PGDConfig(**groups["pgd"])
        attack = AttackConfig(pgd=pgd, **groups["attack"])
    except AttackError as exc:
        raise ConfigError(f"attack: {exc}", "attack") from exc
    try:
        agg = AggregatorKind(**groups["agg"])
    except AggregationError as exc:
        raise ConfigError(f"aggregation: {exc}", "aggregator") from exc
    data = DataConfig(**groups["data"])
    return SimConfig(data=data, attack=attack, aggregation=agg, **groups["sim"])


def load_config(path=None, overrides=()) -> tuple[SimConfig, dict[str, Any], bytes]:
    """Read a TOML file, apply overrides; returns (config, flat values, raw file bytes)."""
    raw = b""
    flat: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "config")
        raw = path.read_bytes()
        try:
            flat = flatten_tree(tomllib.loads(raw.decode()))
        except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}", "config") from exc
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        flat[key] = value
    return build_config(flat), flat, raw


def config_hash(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def to_flat(config: SimConfig) -> dict[str, Any]:
    """Inverse of :func:`build_config` (every key resolved)."""
    sources = {
        "sim": config,
        "data": config.data,
        "attack": config.attack,
        "pgd": config.attack.pgd,
        "agg": config.aggregation,
    }
    out = {}
    for name in CONFIG_KEYS:
        group, attr = _KEYS[name]
        value = getattr(sources[group], attr)
        out[name] = list(value) if isinstance(value, tuple) else value
    return out


def to_tree(config: SimConfig) -> dict[str, Any]:
    tree: dict[str, Any] = {}
    for name, value in to_flat(config).items():
        node = tree
        *parents, leaf = name.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return tree
