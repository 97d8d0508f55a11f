"""Vanilla federated averaging with optional quantized or sparse uploads."""

import logging
import math
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from fogml.config import Weighting
from fogml.core import nn
from fogml.core.batching import sample_minibatch
from fogml.core.exceptions import InvalidArgumentError, SpecMismatchError
from fogml.core.models import (
    Dataset,
    LogitTable,
    ParamVector,
    QuantizedParams,
    SparseParams,
)
from fogml.netsim import consume_budget
from fogml.protocols.federation import Device, Federation

logger = logging.getLogger(__name__)

LogitsHook = Callable[[np.ndarray, np.ndarray], None]


class PayloadMode(BaseModel):
    """How devices encode their uploads."""

    model_config = ConfigDict(extra="forbid")

    mode: Literal["dense", "quantized", "sparse"] = "dense"
    bits: int = Field(8, ge=1, le=32)
    fraction: float = Field(0.25, gt=0.0, le=1.0)


class LocalResult(BaseModel):
    """Outcome of one device's local training.

    ``grad`` and ``loss`` belong to the first step, i.e. they are a minibatch
    estimate at the model the device started from.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParamVector
    grad: ParamVector
    loss: float


def local_update(
    data: Dataset,
    params_in: ParamVector,
    tau: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    kd_target: Optional[LogitTable] = None,
    alpha: float = 0.0,
    temperature: float = 1.0,
    on_logits: Optional[LogitsHook] = None,
) -> LocalResult:
    if tau < 1:
        raise InvalidArgumentError("tau must be at least 1", tau=tau)
    spec = params_in.spec
    values = params_in.values.copy()
    first_grad, first_loss = None, 0.0
    for step in range(tau):
        idx = sample_minibatch(rng, len(data), batch_size)
        loss, grad, logits = nn.loss_and_grad_values(
            values,
            spec,
            data.features[idx],
            data.labels[idx],
            kd_target=kd_target,
            alpha=alpha,
            temperature=temperature,
        )
        if on_logits is not None:
            on_logits(logits, data.labels[idx])
        if step == 0:
            first_grad, first_loss = grad, loss
        values -= lr * grad
    return LocalResult(
        params=params_in.replace(values),
        grad=params_in.replace(first_grad),
        loss=first_loss,
    )


def local_train(
    data: Dataset,
    params_in: ParamVector,
    tau: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    **kwargs,
) -> ParamVector:
    """``tau`` SGD steps on minibatches drawn (with replacement) from ``rng``."""
    return local_update(data, params_in, tau, lr, batch_size, rng, **kwargs).params


def aggregate(updates: Sequence[Tuple[ParamVector, float]]) -> ParamVector:
    """Weighted average with weights n_d / sum(n)."""
    if not updates:
        raise InvalidArgumentError("nothing to aggregate")
    spec = updates[0][0].spec
    for params, _ in updates:
        if params.spec != spec:
            raise SpecMismatchError(
                "cannot average parameters of different models",
                expected=spec.model_dump(),
                actual=params.spec.model_dump(),
            )
    weights = np.array([float(w) for _, w in updates])
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidArgumentError(
            "aggregation weights must be non-negative with a positive sum"
        )
    stacked = np.stack([p.values for p, _ in updates])
    return updates[0][0].replace(weights @ stacked / weights.sum())


def quantize(params: ParamVector, bits: int) -> QuantizedParams:
    """Uniform quantization to 2^bits levels over [min, max]."""
    if not 1 <= bits <= 32:
        raise InvalidArgumentError("bits must lie in [1, 32]", bits=bits)
    lo, hi = float(params.values.min()), float(params.values.max())
    scale = (hi - lo) / (2**bits - 1)
    if scale > 0:
        codes = np.rint((params.values - lo) / scale).astype(np.uint64)
    else:
        codes = np.zeros(params.size, dtype=np.uint64)
    return QuantizedParams(
        codes=codes, bits=bits, scale=scale, offset=lo, spec=params.spec
    )


def dequantize(message: QuantizedParams) -> ParamVector:
    values = message.offset + message.codes.astype(np.float64) * message.scale
    return ParamVector(values=values, spec=message.spec)


def quantize_roundtrip(params: ParamVector, bits: int) -> ParamVector:
    return dequantize(quantize(params, bits))


def sparsify(
    update: ParamVector, fraction: float, residual: Optional[np.ndarray] = None
) -> Tuple[SparseParams, np.ndarray]:
    """Send the top ceil(s * P) coordinates of update + residual.

    Returns the sparse message and the new residual (everything not sent).
    Ties keep the lower index.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgumentError("fraction must lie in (0, 1]", fraction=fraction)
    acc = update.values + (0.0 if residual is None else residual)
    k = math.ceil(fraction * update.size)
    chosen = np.sort(np.argsort(-np.abs(acc), kind="stable")[:k])
    leftover = acc.copy()
    leftover[chosen] = 0.0
    message = SparseParams(indices=chosen, values=acc[chosen], spec=update.spec)
    return message, leftover


def upload_params(
    fed: Federation,
    device: Device,
    local: ParamVector,
    global_params: ParamVector,
    round_idx: int,
    payload: PayloadMode,
) -> ParamVector:
    """Encode, charge and decode one device's upload; returns what the server sees."""
    if payload.mode == "quantized":
        message = quantize(local, payload.bits)
        fed.upload(device, message, round_idx, kind="params")
        return dequantize(message)
    if payload.mode == "sparse":
        delta = local.replace(local.values - global_params.values)
        message, device.residual = sparsify(delta, payload.fraction, device.residual)
        fed.upload(device, message, round_idx, kind="params")
        return global_params.replace(global_params.values + message.densify())
    fed.upload(device, local, round_idx, kind="params")
    return local


class RoundResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParamVector
    local: List[LocalResult]


def fedavg_round(
    fed: Federation,
    global_params: ParamVector,
    round_idx: int,
    tau: int,
    lr: float,
    batch_size: int,
    weighting: Weighting = "data",
    payload: Optional[PayloadMode] = None,
) -> RoundResult:
    """Broadcast, local training, upload and aggregation for one round."""
    payload = payload or PayloadMode()
    fed.broadcast(global_params, round_idx, kind="params")
    weights = fed.weights(weighting)
    results, received = [], []
    for device, weight in zip(fed.devices, weights):
        rng = fed.streams.device(device.device_id, round_idx)
        result = local_update(device.data, global_params, tau, lr, batch_size, rng)
        results.append(result)
        seen = upload_params(
            fed, device, result.params, global_params, round_idx, payload
        )
        received.append((seen, weight))
    return RoundResult(params=aggregate(received), local=results)


def round_affordable(fed: Federation, tau: int) -> bool:
    return fed.budget.affordable(tau, 1, fed.num_devices)


def charge_round(fed: Federation, tau: int) -> None:
    consume_budget(fed.budget, tau, 1, [d.device_id for d in fed.devices])


def run_fedavg(
    fed: Federation,
    rounds: int,
    tau: int,
    lr: float,
    batch_size: int,
    weighting: Weighting = "data",
    payload: Optional[PayloadMode] = None,
) -> ParamVector:
    """Fixed-interval FedAvg; stops early when a budgeted round no longer fits."""
    global_params = fed.init_params()
    for round_idx in fed.rounds(rounds, desc="fedavg"):
        if not round_affordable(fed, tau):
            logger.info("budget exhausted after %d rounds", round_idx - 1)
            break
        outcome = fedavg_round(
            fed, global_params, round_idx, tau, lr, batch_size, weighting, payload
        )
        global_params = outcome.params
        charge_round(fed, tau)
        fed.record_model(round_idx, tau, global_params)
    return global_params


def run_local(
    fed: Federation, rounds: int, tau: int, lr: float, batch_size: int
) -> List[ParamVector]:
    """Isolated local training with no communication at all.

    Reports the devices' mean test accuracy and mean local loss.
    """
    start = fed.init_params()
    models = [start for _ in fed.devices]
    for round_idx in fed.rounds(rounds, desc="local"):
        for i, device in enumerate(fed.devices):
            rng = fed.streams.device(device.device_id, round_idx)
            models[i] = local_train(device.data, models[i], tau, lr, batch_size, rng)
        consume_budget(fed.budget, tau, 0, [d.device_id for d in fed.devices])
        losses = [nn.mean_loss(m, d.data) for m, d in zip(models, fed.devices)]
        fed.record(
            round_idx,
            tau,
            float(np.mean(losses)),
            float(np.mean([fed.test_accuracy(m) for m in models])),
        )
    return models
