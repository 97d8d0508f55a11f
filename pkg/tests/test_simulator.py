"""Tests for config-driven runs and sweeps."""

import numpy as np
import pytest

from fogml.core.exceptions import (
    BudgetExhaustedError,
    ConfigError,
    InfeasiblePartitionError,
)
from fogml.datasets import gen_blobs, write_idx
from fogml.sim.processes import PROCESSES, get_process
from fogml.sim.settings import ExperimentConfig
from fogml.sim.simulator import Simulator, build_federation, load_data, sweep

PROTOCOL_SECTIONS = {
    "fedavg": {},
    "local": {},
    "adaptive": {"adaptive": {"tau_max": 5}},
    "gadmm": {"gadmm": {"max_rounds": 4, "inner_steps": 3}},
    "fd": {},
    "fld": {"distill": {"seed_fraction": 0.2}},
    "multfaug": {"faug": {"hops": 2, "pca_components": 2}},
    "blockfl": {"blockfl": {"num_miners": 2}},
}


def _config(small_config, **updates):
    return ExperimentConfig.from_dict({**small_config, **updates})


def test_every_protocol_is_registered():
    assert set(PROCESSES) == set(PROTOCOL_SECTIONS)
    with pytest.raises(ConfigError):
        get_process("gossip")


@pytest.mark.parametrize("protocol", sorted(PROTOCOL_SECTIONS))
def test_each_protocol_runs(small_config, protocol):
    config = _config(small_config, protocol=protocol, **PROTOCOL_SECTIONS[protocol])
    result = Simulator(config).run()
    assert result.protocol == protocol
    assert result.rounds >= 1
    assert result.summary["num_devices"] == 3
    assert result.summary["budget"]["remaining"] is None
    assert 0.0 <= result.final["test_acc"] <= 1.0
    if protocol == "local":
        assert (result.metrics["cum_uplink_bits"] == 0).all()
        assert result.summary["ledger"]["entries"] == 0
    if protocol == "multfaug":
        assert result.privacy["hop_count"] == 2
    if protocol == "blockfl":
        assert [b["round"] for b in result.blocks] == [1, 2, 3]
    if protocol == "gadmm":
        assert result.summary["extras"]["admm_rounds"] == result.rounds


def test_runs_are_deterministic(small_config):
    a = Simulator(_config(small_config)).run()
    b = Simulator(_config(small_config)).run()
    assert a.metrics.equals(b.metrics)
    assert a.ledger.equals(b.ledger)


def test_summary_fields(small_config):
    result = Simulator(_config(small_config)).run()
    summary = result.summary
    assert summary["rounds"] == 3
    assert summary["num_params"] == 15
    assert summary["final"]["round"] == 3
    assert summary["ledger"]["uplink_bytes"] == 3 * 3 * 15 * 4
    assert summary["budget"]["consumed"] == 3 * (2 * 3 + 10)


def test_unaffordable_first_round(small_config):
    config = _config(
        small_config, budget={"c_comp": 1.0, "c_comm": 10.0, "total": 5.0}
    )
    with pytest.raises(BudgetExhaustedError) as err:
        Simulator(config).run()
    assert err.value.exit_code == 4


def test_infeasible_partition(small_config):
    config = _config(
        small_config, partition={"kind": "iid", "num_devices": 3, "per_label": 40}
    )
    with pytest.raises(InfeasiblePartitionError):
        Simulator(config).run()


def test_adaptive_under_budget(small_config):
    config = _config(
        small_config,
        protocol="adaptive",
        budget={"c_comp": 1.0, "c_comm": 10.0, "total": 200.0},
        adaptive={"tau_max": 8, "initial_tau": 2},
    )
    result = Simulator(config).run()
    assert result.final["cum_cost"] <= 200.0
    assert result.summary["extras"]["taus"][0] == 2
    assert result.summary["budget"]["remaining"] >= 0


def test_build_federation_from_config(small_config):
    fed = build_federation(_config(small_config))
    assert fed.num_devices == 3
    assert [d.num_samples for d in fed.devices] == [30, 30, 30]
    assert len(fed.test) == 30
    assert fed.link.uplink_bits_per_round == 1e6


def test_idx_dataset(tmp_path, small_config):
    pool = gen_blobs(3, 4, 30, 0.5, seed=0)
    pixels = pool.model_copy(
        update={
            "features": np.clip(pool.features / 10 + 0.5, 0, 1).round(2),
            "image_shape": (2, 2),
        }
    )
    write_idx(pixels, tmp_path / "x.idx", tmp_path / "y.idx")
    dataset = {
        "kind": "idx",
        "images": str(tmp_path / "x.idx"),
        "labels": str(tmp_path / "y.idx"),
        "num_labels": 3,
        "test_per_label": 5,
        "limit_per_label": 20,
    }
    train, test = load_data(_config(small_config, dataset=dataset))
    assert test.label_counts().tolist() == [5, 5, 5]
    assert train.label_counts().tolist() == [20, 20, 20]
    assert train.image_shape == (2, 2)


def test_sweep(small_config):
    result = sweep(_config(small_config), "training.tau", [1, 3])
    df = result.to_dataframe()
    assert df["value"].tolist() == [1, 3]
    assert [r.metrics["tau"].iloc[0] for r in result.runs] == [1, 3]
    with pytest.raises(ConfigError):
        sweep(_config(small_config), "training.tau", [])


@pytest.mark.slow
def test_fedavg_learns_separable_blobs(small_config):
    config = _config(
        small_config,
        partition={"kind": "iid", "num_devices": 5, "per_label": 10},
        training={"rounds": 20, "tau": 5, "lr": 0.1, "batch_size": 8},
        dataset={
            "kind": "blobs",
            "num_labels": 3,
            "input_dim": 4,
            "n_per_label": 80,
            "spread": 0.5,
            "test_per_label": 20,
        },
    )
    result = Simulator(config).run()
    assert result.final["test_acc"] >= 0.9
    assert result.final["cum_uplink_bits"] == 20 * 5 * 15 * 4 * 8
