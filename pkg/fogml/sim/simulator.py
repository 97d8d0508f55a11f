"""High-level orchestrator: builds a federation from a config and runs it."""

import logging
import math
from typing import Any, Dict, Optional, Sequence, Tuple

from fogml.core.exceptions import BudgetExhaustedError, ConfigError
from fogml.core.models import Dataset
from fogml.core.rng import StreamFactory
from fogml.datasets import gen_blobs, load_idx, partition, train_test_split
from fogml.protocols.federation import Federation
from fogml.sim.processes import ProcessOutput, get_process
from fogml.sim.results import RunResult, SweepResult
from fogml.sim.settings import BlobsDataset, ExperimentConfig

logger = logging.getLogger(__name__)


def load_data(config: ExperimentConfig) -> Tuple[Dataset, Dataset]:
    """Training pool and held-out test set for a config."""
    ds, seed = config.dataset, config.master_seed
    if isinstance(ds, BlobsDataset):
        pool = gen_blobs(
            ds.num_labels, ds.input_dim, ds.n_per_label, ds.spread, seed, ds.separation
        )
        return train_test_split(pool, ds.test_per_label, seed)
    pool = load_idx(ds.images, ds.labels, ds.num_labels)
    if ds.test_images is not None and ds.test_labels is not None:
        train, test = pool, load_idx(ds.test_images, ds.test_labels, ds.num_labels)
    else:
        train, test = train_test_split(pool, ds.test_per_label, seed)
    if ds.limit_per_label is not None:
        _, train = train_test_split(train, ds.limit_per_label, seed + 1)
    return train, test


def build_federation(config: ExperimentConfig) -> Federation:
    train, test = load_data(config)
    plan = config.partition.plan(train.num_labels, config.master_seed)
    devices = partition(train, plan)
    return Federation(
        devices,
        test,
        config.model.spec(train.input_dim, train.num_labels),
        StreamFactory(config.master_seed),
        config.link.link_spec(),
        wire_bytes=config.wire_bytes,
        budget=config.cost_budget(),
        progress=config.progress,
    )


def _finite(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def _summary(
    config: ExperimentConfig, fed: Federation, output: ProcessOutput
) -> Dict[str, Any]:
    final = fed.metrics[-1].model_dump() if fed.metrics else None
    return {
        "protocol": config.protocol,
        "master_seed": config.master_seed,
        "num_devices": fed.num_devices,
        "num_params": fed.spec.num_params,
        "rounds": len(fed.metrics),
        "final": final,
        "ledger": {
            "entries": len(fed.ledger),
            "uplink_bytes": fed.ledger.total_bytes("uplink"),
            "downlink_bytes": fed.ledger.total_bytes("downlink"),
            "sim_time": fed.ledger.elapsed(),
        },
        "budget": {
            "consumed": fed.budget.consumed,
            "remaining": _finite(fed.budget.remaining),
        },
        "extras": output.extras,
    }


class Simulator:
    """Runs one experiment, memoising results on disk when a cache dir is set."""

    def __init__(
        self,
        config: ExperimentConfig,
        *,
        cache_dir: Optional[str] = None,
        use_cache: bool = True,
    ) -> None:
        self.config = config
        self.cache_dir = cache_dir
        self.use_cache = use_cache
        if use_cache and cache_dir:
            from diskcache import Cache

            self._cache = Cache(cache_dir)
        else:
            self._cache = None
        self.federation: Optional[Federation] = None

    def run(self) -> RunResult:
        key = self.config.cache_key()
        if self._cache is not None and key in self._cache:
            logger.info("cache hit for %s run %s", self.config.protocol, key[:12])
            return self._cache[key]

        process = get_process(self.config.protocol)
        fed = build_federation(self.config)
        self.federation = fed
        iterations, rounds = process.first_round(self.config)
        n = fed.num_devices
        if fed.has_budget and not fed.budget.affordable(iterations, rounds, n):
            raise BudgetExhaustedError(
                fed.budget.remaining, needed=fed.budget.cost(iterations, rounds, n)
            )
        logger.info(
            "running %s on %d devices (%d params)",
            self.config.protocol,
            fed.num_devices,
            fed.spec.num_params,
        )
        output = process.run(fed, self.config)
        result = RunResult(
            self.config.protocol,
            fed.metrics_frame(),
            fed.ledger.to_dataframe(),
            _summary(self.config, fed, output),
            privacy=output.privacy.model_dump(mode="json") if output.privacy else None,
            blocks=[b.log_row() for b in output.blocks],
        )
        if self._cache is not None:
            self._cache[key] = result
        return result

    def clear_cache(self) -> None:
        """Clear the on-disk cache, if enabled."""
        if self._cache is not None:
            self._cache.clear()

    def close(self) -> None:
        if self._cache is not None:
            self._cache.close()

    def __enter__(self) -> "Simulator":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


def sweep(
    config: ExperimentConfig,
    key: str,
    values: Sequence[Any],
    cache_dir: Optional[str] = None,
) -> SweepResult:
    """One full run per value of ``key``; every run shares the master seed."""
    if not values:
        raise ConfigError("a sweep needs at least one value", key=key)
    runs = []
    for value in values:
        with Simulator(config.with_override(key, value), cache_dir=cache_dir) as sim:
            runs.append(sim.run())
    return SweepResult(key, values, runs)
