"""Keyed random streams.

Every random draw in a simulation comes from a stream identified by
``(master_seed, scope, *index)``. Streams are built on numpy's counter-based
Philox generator seeded through ``SeedSequence``, so a stream's output depends
only on its key: devices, rounds and miners can be evaluated in any order (or
in parallel) without changing results.
"""

import zlib

import numpy as np


def _scope_key(scope: str) -> int:
    # crc32 is stable across processes, unlike hash()
    return zlib.crc32(scope.encode("utf-8"))


def stream(master_seed: int, scope: str, *index: int) -> np.random.Generator:
    """Return the generator for ``(master_seed, scope, *index)``."""
    entropy = [int(master_seed), _scope_key(scope), *(int(i) for i in index)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


class StreamFactory:
    """Hands out keyed streams for one experiment."""

    def __init__(self, master_seed: int) -> None:
        self.master_seed = int(master_seed)

    def get(self, scope: str, *index: int) -> np.random.Generator:
        return stream(self.master_seed, scope, *index)

    def device(self, device_id: int, round_idx: int) -> np.random.Generator:
        """Minibatch stream of one device in one round."""
        return self.get("device", device_id, round_idx)
