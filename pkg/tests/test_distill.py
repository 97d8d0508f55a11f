"""Tests for federated distillation and its server-side distillation variant."""

import numpy as np
import pytest

from fogml.core.exceptions import EmptySeedsError, InvalidArgumentError
from fogml.core.models import Dataset, LogitTable, ModelSpec, ParamVector, SeedBatch
from fogml.netsim import payload_bytes
from fogml.protocols.distill import (
    LogitAccumulator,
    accumulate_logits,
    draw_seeds,
    fd_round,
    fld_server_distill,
    global_average,
    leave_one_out,
    pool_seeds,
    run_fd,
    run_fld,
)
from fogml.protocols.fedavg import run_local
from fogml.sim.settings import ExperimentConfig
from fogml.sim.simulator import Simulator


def test_accumulate_logits_per_label_mean():
    table = accumulate_logits(LogitTable.empty(2), [[1.0, 2.0], [3.0, 4.0]], [0, 0])
    assert table.rows.tolist() == [[2.0, 3.0], [0.0, 0.0]]
    assert table.counts.tolist() == [2.0, 0.0]
    table = accumulate_logits(table, [[5.0, 6.0]], [1])
    assert table.rows[1].tolist() == [5.0, 6.0]
    assert table.present.tolist() == [True, True]


def test_incremental_accumulation_matches_batch_mean(rng):
    logits = rng.standard_normal((30, 3))
    labels = rng.integers(0, 3, 30)
    sink = LogitAccumulator(3)
    for start in range(0, 30, 7):
        sink(logits[start : start + 7], labels[start : start + 7])
    for label in range(3):
        expected = logits[labels == label].mean(axis=0)
        np.testing.assert_allclose(sink.table.rows[label], expected)
    assert sink.table.counts.sum() == 30


def test_accumulate_logits_validates():
    with pytest.raises(InvalidArgumentError):
        accumulate_logits(LogitTable.empty(2), [[1.0, 2.0, 3.0]], [0])
    with pytest.raises(InvalidArgumentError):
        accumulate_logits(LogitTable.empty(2), [[1.0, 2.0]], [2])


def test_global_average_weights_by_counts():
    a = LogitTable(
        rows=[[1.0, 1.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], counts=[1, 0, 0]
    )
    b = LogitTable(
        rows=[[5.0, 5.0, 0.0], [2.0, 2.0, 0.0], [0.0, 0.0, 0.0]], counts=[3, 2, 0]
    )
    avg = global_average([a, b])
    assert avg.rows[0].tolist() == [4.0, 4.0, 0.0]
    assert avg.rows[1].tolist() == [2.0, 2.0, 0.0]
    assert avg.present.tolist() == [True, True, False]
    assert not avg.rows[2].any()


def test_leave_one_out():
    tables = [
        LogitTable(rows=np.eye(2) * k, counts=[1, 1]) for k in (1.0, 2.0, 3.0)
    ]
    out = leave_one_out(tables, 1)
    np.testing.assert_allclose(out.rows, np.eye(2) * 2.0)
    alone = leave_one_out(tables[:1], 0)
    assert not alone.any_present()
    with pytest.raises(InvalidArgumentError):
        global_average([])


def test_logit_upload_is_far_smaller_than_parameters():
    spec = ModelSpec(kind="MLP1", input_dim=784, hidden_dim=64, num_labels=10)
    ratio = payload_bytes(ParamVector.zeros(spec)) / payload_bytes(LogitTable.empty(10))
    assert ratio >= 10
    assert ratio == pytest.approx(508.9)


def test_single_device_fd_is_local_training(make_federation):
    fd = make_federation(num_devices=1)
    local = make_federation(num_devices=1)
    fd_models = run_fd(fd, rounds=3, interval=4, lr=0.1, batch_size=8, alpha=0.5)
    local_models = run_local(local, rounds=3, tau=4, lr=0.1, batch_size=8)
    np.testing.assert_array_equal(fd_models[0].values, local_models[0].values)


def test_fd_exchanges_only_logits(make_federation):
    fed = make_federation(num_devices=3)
    models = run_fd(fed, rounds=3, interval=4, lr=0.1, batch_size=8)
    assert len(models) == 3
    kinds = {e.kind for e in fed.ledger.entries}
    assert kinds == {"logits"}
    assert len(fed.ledger.select(direction="uplink")) == 9
    assert len(fed.ledger.select(direction="downlink")) == 9
    frame = fed.metrics_frame()
    assert frame["round"].tolist() == [1, 2, 3]
    assert frame["test_acc"].between(0, 1).all()


def test_fd_round_uploads_then_downloads_leave_one_out(make_federation):
    fed = make_federation(num_devices=3)
    start = fed.init_params()
    for device in fed.devices:
        device.params = start
    downloads = fd_round(fed, 1, [None, None, None], interval=2, lr=0.1, batch_size=8)
    assert len(downloads) == 3
    assert all(table.num_labels == 4 for table in downloads)
    assert len(fed.ledger.select(round=1, direction="uplink", kind="logits")) == 3
    assert len(fed.ledger.select(round=1, direction="downlink", kind="logits")) == 3
    assert all(not np.array_equal(d.params.values, start.values) for d in fed.devices)


def test_draw_seeds_rounds_up(make_federation):
    fed = make_federation(num_devices=2)
    device = fed.devices[0]
    batch = draw_seeds(device, 0.02, np.random.default_rng(0))
    assert len(batch) == 2
    assert len(set(map(tuple, batch.samples.features.tolist()))) == 2


def test_pool_seeds_requires_samples():
    empty = Dataset(features=np.zeros((0, 2)), labels=[], num_labels=2)
    with pytest.raises(EmptySeedsError):
        pool_seeds([SeedBatch(samples=empty, fraction=0.1)])


def test_server_distill_without_seeds():
    spec = ModelSpec(kind="LR", input_dim=2, num_labels=2)
    empty = Dataset(features=np.zeros((0, 2)), labels=[], num_labels=2)
    with pytest.raises(EmptySeedsError):
        fld_server_distill(
            LogitTable.empty(2), empty, spec, 1, 0.1, 4, np.random.default_rng(0)
        )


def test_zero_alpha_ignores_global_table(toy_dataset):
    spec = ModelSpec(kind="LR", input_dim=2, num_labels=2)
    tables = [
        LogitTable(rows=[[5.0, -5.0], [-5.0, 5.0]], counts=[1, 1]),
        LogitTable(rows=[[-3.0, 3.0], [0.0, 1.0]], counts=[4, 2]),
    ]
    results = [
        fld_server_distill(
            t, toy_dataset, spec, 3, 0.5, 2, np.random.default_rng(1), alpha=0.0
        )
        for t in tables
    ]
    np.testing.assert_array_equal(results[0].values, results[1].values)
    assert not np.array_equal(results[0].values, np.zeros(spec.num_params))


@pytest.mark.parametrize("seed_upload,expected", [("every_round", 6), ("once", 2)])
def test_fld_seed_uploads(make_federation, seed_upload, expected):
    fed = make_federation(num_devices=2)
    run_fld(
        fed,
        rounds=3,
        interval=3,
        lr=0.1,
        batch_size=8,
        seed_fraction=0.05,
        seed_upload=seed_upload,
    )
    assert len(fed.ledger.select(kind="seeds")) == expected
    assert len(fed.ledger.select(kind="logits")) == 6
    assert len(fed.ledger.select(kind="params", direction="downlink")) == 6


def test_fld_learns_blobs(make_federation):
    fed = make_federation(num_devices=4)
    run_fld(
        fed,
        rounds=6,
        interval=5,
        lr=0.1,
        batch_size=8,
        seed_fraction=0.1,
        server_epochs=10,
    )
    assert fed.metrics_frame()["test_acc"].iloc[-1] > 0.8


def test_server_distill_stops_once_the_seed_loss_settles(toy_dataset):
    spec = ModelSpec(kind="LR", input_dim=2, num_labels=2)
    table = LogitTable.empty(2)

    def distill(epochs, tol):
        rng = np.random.default_rng(2)
        return fld_server_distill(
            table, toy_dataset, spec, epochs, 0.5, 2, rng, tol=tol
        )

    # any tolerance above 1 stops after the second epoch
    np.testing.assert_array_equal(distill(50, 10.0).values, distill(2, 0.0).values)
    with pytest.raises(InvalidArgumentError):
        distill(0, 0.0)


def _distill_config(protocol, master_seed, partition, **dataset):
    return ExperimentConfig.from_dict(
        {
            "protocol": protocol,
            "dataset": {"kind": "blobs", "spread": 1.0, **dataset},
            "partition": partition,
            "training": {"rounds": 10, "tau": 5, "lr": 0.1, "batch_size": 16},
            "distill": {"seed_fraction": 0.02},
            "master_seed": master_seed,
        }
    )


@pytest.mark.slow
def test_fld_beats_fd_when_devices_hold_two_labels_each():
    # device d holds labels d and d + 1 only
    counts = np.zeros((10, 10), dtype=int)
    for d in range(10):
        counts[d, [d, (d + 1) % 10]] = 250
    partition = {"kind": "explicit", "num_devices": 10, "counts": counts.tolist()}
    dataset = {
        "num_labels": 10,
        "input_dim": 10,
        "n_per_label": 550,
        "test_per_label": 50,
    }
    wins = 0
    for master_seed in range(5):
        fd = Simulator(_distill_config("fd", master_seed, partition, **dataset)).run()
        fld = Simulator(_distill_config("fld", master_seed, partition, **dataset)).run()
        wins += fld.final["test_acc"] >= fd.final["test_acc"]
    assert wins >= 4


@pytest.mark.slow
def test_fd_keeps_up_with_fedavg_on_iid_data():
    partition = {"kind": "iid", "num_devices": 5, "per_label": 50}
    dataset = {
        "num_labels": 4,
        "input_dim": 8,
        "n_per_label": 350,
        "test_per_label": 100,
    }
    close = 0
    for master_seed in range(5):
        fd = Simulator(_distill_config("fd", master_seed, partition, **dataset)).run()
        fedavg = _distill_config("fedavg", master_seed, partition, **dataset)
        reference = Simulator(fedavg).run()
        close += reference.final["test_acc"] - fd.final["test_acc"] <= 0.05
    assert close >= 4
