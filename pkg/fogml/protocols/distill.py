"""Federated distillation (FD) and federated learning after distillation (FLD).

FD devices never exchange parameters: each uploads a LogitTable holding its
average logits per ground-truth label and regularizes its local training
towards the average of the *other* devices' tables. FLD keeps the FD uplink,
adds a few raw seed samples, and lets the server convert the global table
into parameters by distilling a model on the pooled seeds.
"""

import logging
import math
from typing import List, Literal, Optional, Sequence

import numpy as np

from fogml.config import (
    DEFAULT_ALPHA,
    DEFAULT_SEED_FRACTION,
    DEFAULT_SERVER_EPOCHS,
    DEFAULT_TEMPERATURE,
    SERVER_LOSS_TOL,
)
from fogml.core import nn
from fogml.core.batching import epoch_batches
from fogml.core.exceptions import EmptySeedsError, InvalidArgumentError
from fogml.core.models import Dataset, LogitTable, ModelSpec, ParamVector, SeedBatch
from fogml.netsim import consume_budget
from fogml.protocols.fedavg import local_update
from fogml.protocols.federation import Device, Federation

logger = logging.getLogger(__name__)

SeedUpload = Literal["every_round", "once"]


def accumulate_logits(
    table: LogitTable, logits: np.ndarray, labels: np.ndarray
) -> LogitTable:
    """Fold a batch of logits into the per-label running means."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    L = table.num_labels
    if logits.shape[1] != L:
        raise InvalidArgumentError(
            "logit width must equal the number of labels", width=logits.shape[1], L=L
        )
    if labels.size and (labels.min() < 0 or labels.max() >= L):
        raise InvalidArgumentError("label out of range", L=L)
    added = np.bincount(labels, minlength=L).astype(np.float64)
    sums = np.zeros((L, L))
    np.add.at(sums, labels, logits)
    counts = table.counts + added
    rows = table.rows.copy()
    touched = added > 0
    rows[touched] = (
        table.rows[touched] * table.counts[touched, None] + sums[touched]
    ) / counts[touched, None]
    return LogitTable(rows=rows, counts=counts)


class LogitAccumulator:
    """Mutable wrapper so training hooks can fold logits in as they appear."""

    def __init__(self, num_labels: int) -> None:
        self.table = LogitTable.empty(num_labels)

    def __call__(self, logits: np.ndarray, labels: np.ndarray) -> None:
        self.table = accumulate_logits(self.table, logits, labels)


def global_average(
    tables: Sequence[LogitTable], weights: Optional[Sequence[float]] = None
) -> LogitTable:
    """Count-weighted per-row average; rows absent everywhere stay absent."""
    if not tables:
        raise InvalidArgumentError("nothing to average")
    if weights is None:
        w = np.ones(len(tables))
    else:
        w = np.asarray(weights, dtype=np.float64)
    counts = np.stack([t.counts for t in tables])
    mass = w[:, None] * counts
    total = mass.sum(axis=0)
    weighted = np.einsum("dl,dlk->lk", mass, np.stack([t.rows for t in tables]))
    rows = np.zeros_like(weighted)
    present = total > 0
    rows[present] = weighted[present] / total[present, None]
    return LogitTable(rows=rows, counts=np.where(present, counts.sum(axis=0), 0.0))


def leave_one_out(
    tables: Sequence[LogitTable], device: int, weights: Optional[Sequence[float]] = None
) -> LogitTable:
    """Global average without ``device``'s own table."""
    keep = [i for i in range(len(tables)) if i != device]
    if not keep:
        return LogitTable.empty(tables[device].num_labels)
    return global_average(
        [tables[i] for i in keep],
        None if weights is None else [weights[i] for i in keep],
    )


def _target(table: Optional[LogitTable]) -> Optional[LogitTable]:
    return table if table is not None and table.any_present() else None


def fd_round(
    fed: Federation,
    round_idx: int,
    targets: Sequence[Optional[LogitTable]],
    interval: int,
    lr: float,
    batch_size: int,
    alpha: float = DEFAULT_ALPHA,
    temperature: float = DEFAULT_TEMPERATURE,
) -> List[LogitTable]:
    """One FD round; returns the leave-one-out tables each device downloads.

    Devices without a usable target train without the regularizer.
    """
    uploaded: List[LogitTable] = []
    for device, target in zip(fed.devices, targets):
        target = _target(target)
        sink = LogitAccumulator(fed.spec.num_labels)
        rng = fed.streams.device(device.device_id, round_idx)
        device.params = local_update(
            device.data,
            device.params,
            interval,
            lr,
            batch_size,
            rng,
            kd_target=target,
            alpha=alpha if target is not None else 0.0,
            temperature=temperature,
            on_logits=sink,
        ).params
        fed.upload(device, sink.table, round_idx, kind="logits")
        uploaded.append(sink.table)

    downloads = []
    for i, device in enumerate(fed.devices):
        table = leave_one_out(uploaded, i)
        fed.send(table, "downlink", round_idx, "server", device.name, kind="logits")
        downloads.append(table)
    return downloads


def _record_devices(fed: Federation, round_idx: int, tau: int) -> None:
    losses = [nn.mean_loss(d.params, d.data) for d in fed.devices]
    accs = [fed.test_accuracy(d.params) for d in fed.devices]
    fed.record(round_idx, tau, float(np.mean(losses)), float(np.mean(accs)))


def run_fd(
    fed: Federation,
    rounds: int,
    interval: int,
    lr: float,
    batch_size: int,
    alpha: float = DEFAULT_ALPHA,
    temperature: float = DEFAULT_TEMPERATURE,
) -> List[ParamVector]:
    """FD; test accuracy is the mean over the devices' own models."""
    start = fed.init_params()
    for device in fed.devices:
        device.params = start
    targets: List[Optional[LogitTable]] = [None] * fed.num_devices
    for round_idx in fed.rounds(rounds, desc="fd"):
        if not fed.budget.affordable(interval, 1, fed.num_devices):
            logger.info("budget exhausted after %d rounds", round_idx - 1)
            break
        targets = fd_round(
            fed, round_idx, targets, interval, lr, batch_size, alpha, temperature
        )
        consume_budget(fed.budget, interval, 1, [d.device_id for d in fed.devices])
        _record_devices(fed, round_idx, interval)
    return [d.params for d in fed.devices]


def draw_seeds(device: Device, fraction: float, rng: np.random.Generator) -> SeedBatch:
    """ceil(fraction * n) local samples chosen without replacement."""
    n = device.num_samples
    k = math.ceil(fraction * n)
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return SeedBatch(samples=device.data.subset(idx), fraction=fraction)


def pool_seeds(batches: Sequence[SeedBatch]) -> Dataset:
    non_empty = [b.samples for b in batches if len(b) > 0]
    if not non_empty:
        raise EmptySeedsError("no seed samples reached the server")
    pooled = non_empty[0]
    for extra in non_empty[1:]:
        pooled = pooled.concat(extra)
    return pooled


def fld_server_distill(
    global_table: LogitTable,
    seeds: Dataset,
    spec: ModelSpec,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    alpha: float = DEFAULT_ALPHA,
    temperature: float = DEFAULT_TEMPERATURE,
    init: Optional[ParamVector] = None,
    tol: float = SERVER_LOSS_TOL,
) -> ParamVector:
    """Train a global model on the pooled seeds against the global logit table.

    Warm-starts from ``init`` when given, otherwise from zeros. Training runs
    until an epoch lowers the mean seed loss by less than ``tol`` (relative),
    or for ``epochs`` epochs at most.
    """
    if len(seeds) == 0:
        raise EmptySeedsError("server distillation needs seed samples")
    if epochs < 1:
        raise InvalidArgumentError("server distillation needs an epoch", epochs=epochs)
    target = _target(global_table)
    params = init if init is not None else ParamVector.zeros(spec)
    values = params.values.copy()
    previous = math.inf
    for epoch in range(1, epochs + 1):
        total = 0.0
        for idx in epoch_batches(rng, len(seeds), batch_size):
            loss, grad, _ = nn.loss_and_grad_values(
                values,
                spec,
                seeds.features[idx],
                seeds.labels[idx],
                kd_target=target,
                alpha=alpha if target is not None else 0.0,
                temperature=temperature,
            )
            values -= lr * grad
            total += loss * len(idx)
        current = total / len(seeds)
        if previous - current < tol * abs(previous):
            break
        previous = current
    logger.debug("server distillation stopped after %d epochs", epoch)
    return params.replace(values)


def run_fld(
    fed: Federation,
    rounds: int,
    interval: int,
    lr: float,
    batch_size: int,
    alpha: float = DEFAULT_ALPHA,
    temperature: float = DEFAULT_TEMPERATURE,
    seed_fraction: float = DEFAULT_SEED_FRACTION,
    server_epochs: int = DEFAULT_SERVER_EPOCHS,
    server_lr: Optional[float] = None,
    warm_start: bool = True,
    seed_upload: SeedUpload = "every_round",
) -> ParamVector:
    """FD uplink, FedAvg-style downlink.

    Devices train with plain cross-entropy from the downloaded model and upload
    their logit table plus seeds; the server distills and broadcasts parameters.
    """
    seeds = [
        draw_seeds(d, seed_fraction, fed.streams.get("seeds", d.device_id))
        for d in fed.devices
    ]
    global_params = fed.init_params()
    pooled: Optional[Dataset] = None
    for round_idx in fed.rounds(rounds, desc="fld"):
        if not fed.budget.affordable(interval, 1, fed.num_devices):
            logger.info("budget exhausted after %d rounds", round_idx - 1)
            break
        tables = []
        for device, batch in zip(fed.devices, seeds):
            sink = LogitAccumulator(fed.spec.num_labels)
            rng = fed.streams.device(device.device_id, round_idx)
            local_update(
                device.data,
                global_params,
                interval,
                lr,
                batch_size,
                rng,
                on_logits=sink,
            )
            fed.upload(device, sink.table, round_idx, kind="logits")
            if seed_upload == "every_round" or round_idx == 1:
                fed.upload(device, batch, round_idx, kind="seeds")
            tables.append(sink.table)
        if pooled is None:
            pooled = pool_seeds(seeds)

        global_params = fld_server_distill(
            global_average(tables),
            pooled,
            fed.spec,
            server_epochs,
            server_lr or lr,
            batch_size,
            fed.streams.get("server", round_idx),
            alpha=alpha,
            temperature=temperature,
            init=global_params if warm_start else None,
        )
        fed.broadcast(global_params, round_idx, kind="params")
        consume_budget(fed.budget, interval, 1, [d.device_id for d in fed.devices])
        fed.record_model(round_idx, interval, global_params)
    return global_params
