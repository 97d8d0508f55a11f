"""Tests for IDX loading, synthetic blobs and partitioning."""

import gzip
import struct

import numpy as np
import pytest

from fogml.core.exceptions import (
    BadMagicError,
    CountMismatchError,
    InfeasiblePartitionError,
    InvalidArgumentError,
    TruncatedFileError,
)
from fogml.core.models import Dataset, PartitionPlan
from fogml.core.rng import stream
from fogml.datasets import (
    blob_centers,
    gen_blobs,
    load_idx,
    partition,
    split_validation,
    train_test_split,
    write_idx,
)


def _write_pair(tmp_path, pixels, labels, magic=2051, count=None):
    images = tmp_path / "images.idx"
    n = len(labels) if count is None else count
    header = struct.pack(">4I", magic, len(pixels), 2, 2)
    images.write_bytes(header + bytes(np.ravel(pixels).tolist()))
    label_file = tmp_path / "labels.idx"
    label_file.write_bytes(struct.pack(">2I", 2049, n) + bytes(labels))
    return images, label_file


def test_load_hand_built_idx(tmp_path):
    images, labels = _write_pair(tmp_path, [[0, 255, 51, 102], [255, 0, 0, 0]], [3, 7])
    data = load_idx(images, labels)
    assert len(data) == 2
    assert data.image_shape == (2, 2)
    assert data.bounded
    np.testing.assert_array_equal(data.labels, [3, 7])
    np.testing.assert_allclose(data.features[0], [0.0, 1.0, 0.2, 0.4])


def test_load_gzipped_idx(tmp_path):
    images, labels = _write_pair(tmp_path, [[1, 2, 3, 4]], [0])
    gz = tmp_path / "images.idx.gz"
    gz.write_bytes(gzip.compress(images.read_bytes()))
    assert load_idx(gz, labels).features.shape == (1, 4)


def test_bad_magic(tmp_path):
    images, labels = _write_pair(tmp_path, [[0, 0, 0, 0]], [0], magic=2050)
    with pytest.raises(BadMagicError) as err:
        load_idx(images, labels)
    assert err.value.code == "bad_magic"


def test_truncated_images(tmp_path):
    images, labels = _write_pair(tmp_path, [[0, 0, 0, 0]], [0])
    images.write_bytes(images.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(images, labels)


def test_count_mismatch(tmp_path):
    images = tmp_path / "images.idx"
    images.write_bytes(struct.pack(">4I", 2051, 2, 2, 2) + bytes(8))
    labels = tmp_path / "labels.idx"
    labels.write_bytes(struct.pack(">2I", 2049, 1) + bytes([0]))
    with pytest.raises(CountMismatchError):
        load_idx(images, labels)


def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (6, 12)) / 255.0
    data = Dataset(
        features=pixels,
        labels=rng.integers(0, 10, 6),
        num_labels=10,
        image_shape=(3, 4),
        bounded=True,
    )
    write_idx(data, tmp_path / "x.idx", tmp_path / "y.idx")
    back = load_idx(tmp_path / "x.idx", tmp_path / "y.idx")
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.labels, data.labels)
    assert back.image_shape == (3, 4)


def test_blob_centers_are_separated():
    centers = blob_centers(10, 3, separation=4.0)
    dists = np.linalg.norm(centers[:, None] - centers[None], axis=2)
    assert dists[~np.eye(10, dtype=bool)].min() >= 4.0 - 1e-12


def test_zero_spread_blobs_sit_on_centers():
    data = gen_blobs(3, 2, 5, spread=0.0, seed=1)
    np.testing.assert_array_equal(data.features, blob_centers(3, 2)[data.labels])


def test_blobs_are_deterministic():
    a = gen_blobs(3, 4, 10, 1.0, seed=9)
    b = gen_blobs(3, 4, 10, 1.0, seed=9)
    np.testing.assert_array_equal(a.features, b.features)


def test_iid_partition_histograms():
    pool = gen_blobs(4, 2, 60, 1.0, seed=0)
    devices = partition(pool, PartitionPlan.iid(10, 4, 5))
    for d, local in enumerate(devices):
        assert local.device_id == d
        assert local.label_counts().tolist() == [5, 5, 5, 5]


def test_target_label_partition_histograms():
    pool = gen_blobs(10, 3, 2000, 1.0, seed=0)
    plan = PartitionPlan.target_label(10, 10, target_count=4, other_count=200)
    for d, local in enumerate(partition(pool, plan)):
        expected = [200] * 10
        expected[d] = 4
        assert local.label_counts().tolist() == expected


def test_shared_target_partition():
    plan = PartitionPlan.target_label(4, 3, target_count=2, other_count=10, target=1)
    assert plan.per_label_counts == [[10, 2, 10]] * 4
    assert plan.totals().tolist() == [40, 8, 40]
    with pytest.raises(InvalidArgumentError):
        PartitionPlan.target_label(4, 3, target=3)


def test_partition_is_disjoint():
    pool = gen_blobs(3, 2, 30, 1.0, seed=2)
    # tag every row so samples can be traced back
    index = np.column_stack([np.arange(len(pool)), np.zeros(len(pool))])
    pool = pool.model_copy(update={"features": index})
    plan = PartitionPlan.from_counts([[3, 1, 0], [2, 2, 9], [5, 0, 1]])
    devices = partition(pool, plan)
    tags = np.concatenate([d.features[:, 0] for d in devices])
    assert len(tags) == len(set(tags.tolist())) == 23
    for local in devices:
        rows = local.features[:, 0].astype(int)
        np.testing.assert_array_equal(pool.labels[rows], local.labels)


def test_infeasible_partition_lists_labels():
    pool = gen_blobs(3, 2, 10, 1.0, seed=0)
    with pytest.raises(InfeasiblePartitionError) as err:
        partition(pool, PartitionPlan.from_counts([[6, 1, 11], [6, 0, 0]]))
    assert err.value.deficient_labels == [0, 2]
    assert err.value.exit_code == 3
    assert err.value.detail["deficient"]["0"] == {"requested": 12, "available": 10}


def test_train_test_split_holds_out_per_label():
    pool = gen_blobs(3, 2, 20, 1.0, seed=0)
    train, test = train_test_split(pool, 5, seed=0)
    assert test.label_counts().tolist() == [5, 5, 5]
    assert train.label_counts().tolist() == [15, 15, 15]


def test_split_validation_is_eighty_twenty():
    pool = gen_blobs(2, 2, 25, 1.0, seed=0)
    local = partition(pool, PartitionPlan.iid(1, 2, 25))[0]
    train, val = split_validation(local, stream(0, "device", 0, 0))
    assert (len(train), len(val)) == (40, 10)
    assert train.device_id == val.device_id == 0
