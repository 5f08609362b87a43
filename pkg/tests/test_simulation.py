import numpy as np
import pytest

from fedif import nn
from fedif.config import build_config
from fedif.data import synth_blobs
from fedif.errors import DatasetMissingError
from fedif.simulation import (Simulation, cumulative_influences, load_datasets, load_params, local_training,
                              run_simulation, save_params, select_clients)
from fedif.valuation import validation_gradient

SMALL = {
    "clients": 8, "fraction": 0.5, "rounds": 3, "lr": 0.02, "local_epochs": 2,
    "data.n_classes": 3, "data.n_features": 6, "data.train_per_class": 40, "data.test_per_class": 20,
    "model.hidden": [8],
}


def config(**kw):
    flat = dict(SMALL)
    flat.update(kw)
    return build_config(flat)


def test_select_clients():
    assert select_clients(7, 1.0, 1, 0) == list(range(7))
    assert len(select_clients(100, 0.001, 1, 0)) == 1
    ids = select_clients(100, 0.1, 3, 0)
    assert len(ids) == 10 and len(set(ids)) == 10 and ids == sorted(ids)
    assert select_clients(100, 0.1, 3, 0) == ids
    assert select_clients(100, 0.1, 4, 0) != ids


def blobs_task(seed):
    ds = synth_blobs(3, 30, 6, 0.1, seed=seed)
    spec = nn.ModelSpec((6, 8, 3))
    return spec, nn.init_params(spec, np.random.default_rng(seed)), ds


def test_local_training_zero_epochs_returns_start():
    spec, w, ds = blobs_task(0)
    out, losses = local_training(w, spec, ds.features, ds.labels, 0, 16, 0.01, 0.9, np.random.default_rng(0))
    np.testing.assert_array_equal(out, w)
    assert out is not w and losses.size == 0


def test_local_training_deterministic():
    spec, w, ds = blobs_task(1)
    a, _ = local_training(w, spec, ds.features, ds.labels, 2, 16, 0.01, 0.9, np.random.default_rng(5))
    b, _ = local_training(w, spec, ds.features, ds.labels, 2, 16, 0.01, 0.9, np.random.default_rng(5))
    assert a.tobytes() == b.tobytes()


def test_local_training_loss_decreases():
    decreasing = 0
    for seed in range(5):
        spec, w, ds = blobs_task(seed)
        _, losses = local_training(w, spec, ds.features, ds.labels, 5, 16, 0.01, 0.9, np.random.default_rng(seed))
        decreasing += bool(np.all(np.diff(losses) < 0))
    assert decreasing >= 4


def test_local_training_prox_zero_equals_plain():
    spec, w, ds = blobs_task(2)
    a, _ = local_training(w, spec, ds.features, ds.labels, 2, 8, 0.01, 0.9, np.random.default_rng(1))
    b, _ = local_training(w, spec, ds.features, ds.labels, 2, 8, 0.01, 0.9, np.random.default_rng(1), prox_mu=0.0)
    np.testing.assert_array_equal(a, b)
    c, _ = local_training(w, spec, ds.features, ds.labels, 2, 8, 0.01, 0.9, np.random.default_rng(1), prox_mu=1.0)
    assert np.linalg.norm(c - w) < np.linalg.norm(a - w)


def test_fedavg_run_has_no_valuation_fields():
    res = run_simulation(config(aggregator="fedavg"))
    for rec in res.records:
        assert rec.phi == {} and rec.psi == {} and rec.omega == {} and rec.omega_all == []
        assert sum(rec.weights.values()) == pytest.approx(1.0)


def test_fedif_record_consistency():
    cfg = config(aggregator="fedif", rounds=4)
    sim = Simulation(cfg, keep_history=True)
    res = sim.run()
    for rec, hist in zip(res.records, res.history):
        assert sorted(rec.phi) == rec.participants
        assert sum(rec.weights.values()) == pytest.approx(1.0, abs=1e-12)
        assert min(rec.psi.values()) >= 0 and max(rec.psi.values()) == 1.0
        # replay the round's scores from the stored models
        g = validation_gradient(hist.global_before, res.spec, sim.val.features, sim.val.labels)
        for c, up in hist.uploads.items():
            dw = hist.global_before - up
            assert rec.phi[c] == pytest.approx(dw @ g / np.linalg.norm(dw), rel=1e-10)
            assert rec.raw_influence[c] == pytest.approx(dw @ g, rel=1e-10)
    replay = {}
    for hist in res.history:
        g = validation_gradient(hist.global_before, res.spec, sim.val.features, sim.val.labels)
        for c, up in hist.uploads.items():
            replay[c] = replay.get(c, 0.0) + float((hist.global_before - up) @ g)
    got = cumulative_influences(res.records)
    assert got.keys() == replay.keys()
    for c in got:
        assert got[c] == pytest.approx(replay[c], rel=1e-10)


def test_nonparticipant_omega_unchanged():
    res = run_simulation(config(aggregator="fedif", rounds=6, fraction=0.25))
    checked = 0
    for prev, cur in zip(res.records, res.records[1:]):
        for j in range(8):
            if j not in cur.participants:
                assert cur.omega_all[j] == prev.omega_all[j]
                checked += 1
    assert checked > 0


def test_runs_are_deterministic():
    cfg = config(aggregator="fedif", **{"attack.kind": "label_noise", "attack.n_level": 0.5, "attack.n_ratio": [0.5, 0.6]})
    a, b = run_simulation(cfg), run_simulation(cfg)
    for ra, rb in zip(a.records, b.records):
        for field in ("participants", "phi", "psi", "omega", "weights", "val_acc", "test_acc", "train_loss"):
            assert getattr(ra, field) == getattr(rb, field)
    assert a.params.tobytes() == b.params.tobytes()


def test_thread_workers_do_not_change_results():
    a = run_simulation(config(aggregator="fedif"))
    b = run_simulation(config(aggregator="fedif", workers=3))
    assert a.params.tobytes() == b.params.tobytes()


def test_single_round_equals_run_round():
    cfg = config(rounds=1, aggregator="fedif")
    res = run_simulation(cfg)
    sim = Simulation(cfg)
    params, rec = sim.run_round()
    assert params.tobytes() == res.params.tobytes()
    assert rec.weights == res.records[0].weights


@pytest.mark.parametrize("agg", ["krum", "mc_shapley", "fedprox"])
def test_other_aggregators_run(agg):
    res = run_simulation(config(aggregator=agg, rounds=2))
    for rec in res.records:
        assert sum(rec.weights.values()) == pytest.approx(1.0)
        if agg == "krum":
            assert rec.selected in rec.participants and rec.weights[rec.selected] == 1.0


def test_gradient_noise_records_noise_norms():
    cfg = config(aggregator="fedif", **{"attack.kind": "gradient_noise", "attack.n_level": 0.5, "attack.sigma": 0.1})
    res = run_simulation(cfg)
    noisy = set(res.assignment.noisy)
    for rec in res.records:
        assert set(rec.delta_norm) == set(rec.participants)
        for c, v in rec.delta_norm.items():
            assert (v > 0) == (c in noisy)


def test_adversarial_run():
    cfg = config(aggregator="fedavg", rounds=1, **{"attack.kind": "adversarial", "attack.n_level": 0.5,
                                                   "attack.n_ratio": [0.5, 0.6], "attack.pgd.iters": 2})
    res = run_simulation(cfg)
    assert np.all(np.isfinite(res.params))


def test_checkpoints(tmp_path):
    res = run_simulation(config(rounds=2), checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["round_0000.pvec", "round_0001.pvec", "round_0002.pvec"]
    np.testing.assert_array_equal(load_params(tmp_path / "round_0002.pvec"), res.params)
    raw = (tmp_path / "round_0002.pvec").read_bytes()
    assert raw[:4] == b"FPV1" and len(raw) == 16 + 8 * res.spec.n_params


def test_params_round_trip_and_bad_files(tmp_path):
    v = np.random.default_rng(0).normal(size=17)
    save_params(tmp_path / "p", v)
    np.testing.assert_array_equal(load_params(tmp_path / "p"), v)
    (tmp_path / "q").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(ValueError):
        load_params(tmp_path / "q")


def test_missing_dataset(tmp_path):
    cfg = build_config({"data.dataset": "fashion_mnist", "data.path": str(tmp_path)})
    with pytest.raises(DatasetMissingError):
        load_datasets(cfg)
