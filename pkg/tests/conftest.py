import json

import numpy as np
import pytest

from fogml.core.models import Dataset, ModelSpec, PartitionPlan
from fogml.core.rng import StreamFactory
from fogml.datasets import gen_blobs, partition, train_test_split
from fogml.netsim import CostBudget, LinkSpec
from fogml.protocols.federation import Federation


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def lr_spec():
    return ModelSpec(kind="LR", input_dim=4, num_labels=3)


@pytest.fixture
def mlp_spec():
    return ModelSpec(kind="MLP1", input_dim=5, hidden_dim=4, num_labels=3)


@pytest.fixture
def blobs_split():
    """Well separated 4-label blobs in 6 dimensions, 40 test samples per label."""
    pool = gen_blobs(4, 6, 140, spread=0.5, seed=3)
    return train_test_split(pool, 40, seed=3)


@pytest.fixture
def link():
    return LinkSpec(uplink_bits_per_round=8000.0, downlink_bits_per_round=80000.0)


@pytest.fixture
def make_federation(blobs_split, link):
    """Factory: an IID federation over the blobs fixture."""

    def _make(
        num_devices=4,
        per_label=20,
        kind="LR",
        hidden_dim=0,
        budget=None,
        master_seed=0,
        plan=None,
    ):
        train, test = blobs_split
        plan = plan or PartitionPlan.iid(
            num_devices, train.num_labels, per_label, master_seed
        )
        spec = ModelSpec(
            kind=kind,
            input_dim=train.input_dim,
            hidden_dim=hidden_dim,
            num_labels=train.num_labels,
        )
        return Federation(
            partition(train, plan),
            test,
            spec,
            StreamFactory(master_seed),
            link,
            budget=budget,
        )

    return _make


@pytest.fixture
def unit_budget():
    return lambda total: CostBudget(c_comp=1.0, c_comm=10.0, total=total)


@pytest.fixture
def toy_dataset():
    features = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 2.0], [2.0, 0.0]])
    return Dataset(features=features, labels=[0, 1, 0, 1], num_labels=2)


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict to JSON and return its path."""

    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return path

    return _write


@pytest.fixture
def small_config():
    return {
        "protocol": "fedavg",
        "dataset": {
            "kind": "blobs",
            "num_labels": 3,
            "input_dim": 4,
            "n_per_label": 60,
            "spread": 0.5,
            "test_per_label": 10,
        },
        "partition": {"kind": "iid", "num_devices": 3, "per_label": 10},
        "training": {"rounds": 3, "tau": 2, "lr": 0.1, "batch_size": 8},
        "master_seed": 5,
    }
