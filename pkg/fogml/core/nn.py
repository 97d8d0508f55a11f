"""Minimal trainable models with exact gradients.

Two model kinds share one flat parameter layout (see ``ModelSpec.shapes``):

* ``LR``   logits = X W^T + b
* ``MLP1`` logits = relu(X W1^T + b1) W2^T + b2

The loss is mean cross-entropy plus an optional distillation regularizer
``alpha * mean KL(softmax(t / T) || softmax(z / T))`` where ``t`` is the row of a
LogitTable keyed by each sample's ground-truth label. The regularizer gradient
is the plain KL gradient ``(q - p) / T`` (no T^2 rescaling). Rows that are absent
from the table contribute nothing.
"""

from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import log_softmax, logsumexp, softmax, xlogy

from fogml.core.batching import iter_chunks
from fogml.core.exceptions import (
    DimensionMismatchError,
    EmptyBatchError,
    InvalidArgumentError,
    NonFiniteLossError,
    SpecMismatchError,
)
from fogml.core.models import (
    Batch,
    Dataset,
    LogitTable,
    ModelSpec,
    ParamVector,
    unpack_values,
)

Labelled = Union[Batch, Dataset]


def _check_width(spec: ModelSpec, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        actual = features.shape[1] if features.ndim == 2 else features.shape
        raise DimensionMismatchError(spec.input_dim, actual)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Zeros for LR; He-uniform weights and zero biases for MLP1."""
    if spec.kind == "LR":
        return ParamVector.zeros(spec)
    values = np.zeros(spec.num_params)
    w1, _, w2, _ = unpack_values(values, spec)
    w1[...] = rng.uniform(-1.0, 1.0, w1.shape) * np.sqrt(6.0 / spec.input_dim)
    w2[...] = rng.uniform(-1.0, 1.0, w2.shape) * np.sqrt(6.0 / spec.hidden_dim)
    return ParamVector(values=values, spec=spec)


def _forward(
    values: np.ndarray, spec: ModelSpec, features: np.ndarray
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Logits and (for MLP1) the pre-activation hidden layer."""
    parts = unpack_values(values, spec)
    if spec.kind == "LR":
        w, b = parts
        return features @ w.T + b, None
    w1, b1, w2, b2 = parts
    pre = features @ w1.T + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2.T + b2, pre


def forward_values(
    values: np.ndarray, spec: ModelSpec, features: np.ndarray
) -> np.ndarray:
    _check_width(spec, features)
    return _forward(values, spec, features)[0]


def forward_logits(params: ParamVector, batch: Labelled) -> np.ndarray:
    """One row of logits per sample (n x L)."""
    return forward_values(params.values, params.spec, batch.features)


def probabilities(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    return softmax(logits / temperature, axis=1)


def loss_and_grad_values(
    values: np.ndarray,
    spec: ModelSpec,
    features: np.ndarray,
    labels: np.ndarray,
    kd_target: Optional[LogitTable] = None,
    alpha: float = 0.0,
    temperature: float = 1.0,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss, flat gradient and logits for raw arrays (the training hot path)."""
    _check_width(spec, features)
    n = features.shape[0]
    if n == 0:
        raise EmptyBatchError("cannot compute a loss on an empty batch")
    if alpha < 0:
        raise InvalidArgumentError("alpha must be non-negative", alpha=alpha)
    if temperature <= 0:
        raise InvalidArgumentError(
            "temperature must be positive", temperature=temperature
        )
    if alpha > 0 and kd_target is None:
        raise InvalidArgumentError("alpha > 0 requires a kd_target table")

    logits, pre = _forward(values, spec, features)
    rows = np.arange(n)
    per_sample = logsumexp(logits, axis=1) - logits[rows, labels]
    dlogits = softmax(logits, axis=1)
    dlogits[rows, labels] -= 1.0

    if alpha > 0:
        mask = kd_target.present[labels]
        p = softmax(kd_target.rows[labels] / temperature, axis=1)
        log_q = log_softmax(logits / temperature, axis=1)
        kl = np.sum(xlogy(p, p) - p * log_q, axis=1)
        per_sample = per_sample + alpha * np.where(mask, kl, 0.0)
        dlogits += (alpha / temperature) * mask[:, None] * (np.exp(log_q) - p)

    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NonFiniteLossError(int(bad[0]), float(per_sample[bad[0]]))

    dlogits /= n
    grad = np.zeros_like(values)
    parts = unpack_values(grad, spec)
    if spec.kind == "LR":
        gw, gb = parts
        gw[...] = dlogits.T @ features
        gb[...] = dlogits.sum(axis=0)
    else:
        gw1, gb1, gw2, gb2 = parts
        _, _, w2, _ = unpack_values(values, spec)
        hidden = np.maximum(pre, 0.0)
        gw2[...] = dlogits.T @ hidden
        gb2[...] = dlogits.sum(axis=0)
        dpre = (dlogits @ w2) * (pre > 0)
        gw1[...] = dpre.T @ features
        gb1[...] = dpre.sum(axis=0)
    return float(per_sample.mean()), grad, logits


def loss_and_grad(
    params: ParamVector,
    batch: Labelled,
    kd_target: Optional[LogitTable] = None,
    alpha: float = 0.0,
    temperature: float = 1.0,
) -> Tuple[float, ParamVector]:
    """Mean CE (+ alpha * distillation regularizer) and its exact gradient."""
    loss, grad, _ = loss_and_grad_values(
        params.values,
        params.spec,
        batch.features,
        batch.labels,
        kd_target=kd_target,
        alpha=alpha,
        temperature=temperature,
    )
    return loss, params.replace(grad)


def sgd_step(params: ParamVector, grad: ParamVector, lr: float) -> ParamVector:
    """values - lr * grad."""
    if params.spec != grad.spec or params.size != grad.size:
        raise SpecMismatchError(
            "parameter and gradient shapes differ",
            params=params.size,
            grad=grad.size,
        )
    return params.replace(params.values - lr * grad.values)


def predict(params: ParamVector, features: np.ndarray) -> np.ndarray:
    """Argmax labels; ties resolve to the lowest label index."""
    _check_width(params.spec, features)
    out = [
        np.argmax(_forward(params.values, params.spec, chunk)[0], axis=1)
        for chunk in iter_chunks(features)
    ]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: ParamVector, data: Labelled) -> float:
    """Fraction of argmax-correct predictions."""
    if len(data.labels) == 0:
        raise EmptyBatchError("cannot evaluate on an empty batch")
    return float(np.mean(predict(params, data.features) == data.labels))


def mean_loss(params: ParamVector, data: Labelled) -> float:
    """Mean cross-entropy over a dataset."""
    if len(data.labels) == 0:
        raise EmptyBatchError("cannot compute a loss on an empty dataset")
    loss, _, _ = loss_and_grad_values(
        params.values, params.spec, data.features, data.labels
    )
    return loss
