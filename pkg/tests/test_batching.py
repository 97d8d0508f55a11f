"""Unit tests for fogml.core.batching utilities."""
import numpy as np
import pytest

from fogml.core import batching


def test_sample_minibatch_with_replacement():
    idx = batching.sample_minibatch(np.random.default_rng(0), 3, 50)
    assert idx.shape == (50,)
    assert idx.min() >= 0 and idx.max() < 3


def test_sample_minibatch_empty():
    with pytest.raises(ValueError):
        batching.sample_minibatch(np.random.default_rng(0), 0, 4)


def test_epoch_batches_cover_every_row_once():
    batches = batching.epoch_batches(np.random.default_rng(1), 10, 4)
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_make_chunks_no_split():
    assert batching.make_chunks(3) == [(0, 3)]


def test_make_chunks_split(monkeypatch):
    # Force a small limit to trigger splitting
    monkeypatch.setattr(batching, "MAX_ROWS", 4)
    assert batching.make_chunks(10) == [(0, 4), (4, 8), (8, 10)]


def test_iter_chunks_reassembles():
    features = np.arange(14.0).reshape(7, 2)
    chunks = list(batching.iter_chunks(features, chunk=3))
    assert [c.shape[0] for c in chunks] == [3, 3, 1]
    np.testing.assert_array_equal(np.vstack(chunks), features)
