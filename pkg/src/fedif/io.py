"""Run outputs: per-round CSV, summary / manifest JSON."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .simulation import RoundRecord, SimulationResult, cumulative_influences
from .theory import noise_term_report

# (column, deterministic). Wall-clock columns vary between identical runs.
ROUND_COLUMNS: tuple[tuple[str, bool], ...] = (
    ("round", True),
    ("participants", True),
    ("phi", True),
    ("psi", True),
    ("omega", True),
    ("weights", True),
    ("raw_influence", True),
    ("delta_norm", True),
    ("omega_all", True),
    ("selected", True),
    ("val_acc", True),
    ("test_acc", True),
    ("train_loss", True),
    ("train_time", False),
    ("agg_time", False),
)
JSON_COLUMNS = {"participants", "phi", "psi", "omega", "weights", "raw_influence", "delta_norm", "omega_all"}


def deterministic_columns() -> list[str]:
    return [name for name, det in ROUND_COLUMNS if det]


def schema() -> dict:
    return {
        "columns": [
            {"name": name, "deterministic": det, "encoding": "json" if name in JSON_COLUMNS else "scalar"}
            for name, det in ROUND_COLUMNS
        ],
        "notes": "JSON cells are objects keyed by client id (or lists); wall-time columns are excluded from determinism checks.",
    }


def record_to_row(rec: RoundRecord) -> dict[str, str]:
    row = {}
    for name, _ in ROUND_COLUMNS:
        value = getattr(rec, name)
        if name in JSON_COLUMNS:
            if isinstance(value, dict):
                value = {str(k): v for k, v in value.items()}
            row[name] = json.dumps(value, separators=(",", ":"))
        elif value is None:
            row[name] = ""
        else:
            row[name] = repr(float(value)) if isinstance(value, float) else str(value)
    return row


def write_rounds_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[c for c, _ in ROUND_COLUMNS])
        writer.writeheader()
        for rec in records:
            writer.writerow(record_to_row(rec))


class RoundsWriter:
    """Append rows as rounds finish, so partial runs leave a readable CSV."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=[c for c, _ in ROUND_COLUMNS])
        self._writer.writeheader()

    def __call__(self, rec: RoundRecord) -> None:
        self._writer.writerow(record_to_row(rec))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_rounds_csv(path) -> list[dict]:
    """Rows as dicts with JSON cells decoded (client-id keys back to ``int``)."""
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row: dict = {}
            for name, value in raw.items():
                if name in JSON_COLUMNS:
                    v = json.loads(value) if value else {}
                    row[name] = {int(k): x for k, x in v.items()} if isinstance(v, dict) else v
                elif name == "round":
                    row[name] = int(value)
                elif name == "selected":
                    row[name] = int(value) if value else None
                else:
                    row[name] = float(value)
            rows.append(row)
    return rows


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n")


def summarize(result: SimulationResult) -> dict:
    recs = result.records
    test = [r.test_acc for r in recs]
    best = int(np.nanargmax(test)) if recs else 0
    out = {
        "rounds": len(recs),
        "aggregator": result.config.aggregation.name,
        "attack": result.config.attack.kind,
        "seed": result.config.seed,
        "final_test_acc": test[-1] if recs else None,
        "final_val_acc": recs[-1].val_acc if recs else None,
        "best_test_acc": test[best] if recs else None,
        "best_round": recs[best].round if recs else None,
        "final_train_loss": recs[-1].train_loss if recs else None,
        "mean_train_time": float(np.mean([r.train_time for r in recs])) if recs else None,
        "mean_agg_time": float(np.mean([r.agg_time for r in recs])) if recs else None,
        "noisy_clients": list(result.assignment.noisy),
        "final_omega": [float(v) for v in result.omega],
        "n_params": result.spec.n_params,
    }
    if any(r.raw_influence for r in recs):
        out["cumulative_influence"] = cumulative_influences(recs)
    if result.config.attack.kind == "gradient_noise":
        out["noise_term"] = noise_term_report(recs).to_dict()
    return out
