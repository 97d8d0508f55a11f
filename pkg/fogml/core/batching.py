"""Batching utilities: minibatch sampling and chunked evaluation."""

from typing import Iterator, List, Tuple

import numpy as np

# Maximum rows pushed through a forward pass at once
MAX_ROWS = 10_000


def sample_minibatch(
    rng: np.random.Generator, num_samples: int, batch_size: int
) -> np.ndarray:
    """Indices of a minibatch drawn with replacement."""
    if num_samples < 1:
        raise ValueError("cannot sample a minibatch from an empty dataset")
    return rng.integers(0, num_samples, size=batch_size)


def epoch_batches(
    rng: np.random.Generator, num_samples: int, batch_size: int
) -> List[np.ndarray]:
    """One shuffled pass over the data split into minibatches."""
    order = rng.permutation(num_samples)
    return [order[i : i + batch_size] for i in range(0, num_samples, batch_size)]


def make_chunks(num_rows: int, chunk: int = 0) -> List[Tuple[int, int]]:
    """Split ``num_rows`` into ``[start, stop)`` ranges of at most ``chunk`` rows."""
    size = chunk or MAX_ROWS
    if num_rows <= size:
        return [(0, num_rows)]
    return [(i, min(i + size, num_rows)) for i in range(0, num_rows, size)]


def iter_chunks(features: np.ndarray, chunk: int = 0) -> Iterator[np.ndarray]:
    for start, stop in make_chunks(features.shape[0], chunk):
        yield features[start:stop]
