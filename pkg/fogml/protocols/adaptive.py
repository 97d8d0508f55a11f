"""Adaptive communication interval under a joint computation/communication budget.

After every round the server estimates how far local gradients drift from
their average (divergence), how quickly the gradient changes (smoothness) and
how quickly the loss changes (Lipschitz constant), then re-selects the number
of local iterations ``tau`` that best trades progress per unit of budget
against the divergence penalty.
"""

import logging
import math
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from fogml.config import BETA_FLOOR, DEFAULT_TAU_MAX, SMOOTHING_FACTOR, Weighting
from fogml.core.exceptions import DimensionMismatchError, InvalidArgumentError
from fogml.core.models import ParamVector
from fogml.netsim import BudgetState, Exhausted, consume_budget
from fogml.protocols.fedavg import PayloadMode, fedavg_round
from fogml.protocols.federation import Federation

logger = logging.getLogger(__name__)

Vector = Union[np.ndarray, ParamVector]


def _values(v: Vector) -> np.ndarray:
    return v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)


class AdaptiveEstimates(BaseModel):
    delta_hat: float = Field(0.0, ge=0)
    beta_hat: float = Field(0.0, ge=0)
    rho_hat: float = Field(0.0, ge=0)
    c_comp: float = Field(..., ge=0)
    c_comm: float = Field(..., ge=0)

    @field_validator("delta_hat", "beta_hat", "rho_hat")
    def _finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("estimates must be finite")
        return v


class IntervalDecision(BaseModel):
    tau_star: int = Field(..., ge=1)
    candidate_scores: Dict[int, float]


def estimate_divergence(grads: Sequence[Vector], weights: Sequence[float]) -> float:
    """Weighted mean distance between local gradients and their weighted average."""
    if len(grads) < 2:
        raise InvalidArgumentError(
            "divergence needs at least two devices", devices=len(grads)
        )
    if len(weights) != len(grads):
        raise DimensionMismatchError(len(grads), len(weights), what="weights")
    rows = [_values(g) for g in grads]
    for row in rows[1:]:
        if row.shape != rows[0].shape:
            raise DimensionMismatchError(rows[0].shape, row.shape, what="gradient")
    g = np.stack(rows)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mean = w @ g
    return float(w @ np.linalg.norm(g - mean, axis=1))


def _smoothed(raw: float, previous: Optional[float]) -> float:
    if previous is None:
        return raw
    return SMOOTHING_FACTOR * previous + (1.0 - SMOOTHING_FACTOR) * raw


def estimate_smoothness(
    w_prev: Vector,
    w_cur: Vector,
    grad_prev: Vector,
    grad_cur: Vector,
    previous: Optional[float] = None,
) -> float:
    """Secant estimate ||g_cur - g_prev|| / ||w_cur - w_prev||.

    Blended with ``previous`` when given; a zero displacement keeps
    ``previous`` (or 0 when there is none).
    """
    step = np.linalg.norm(_values(w_cur) - _values(w_prev))
    if step == 0:
        return previous if previous is not None else 0.0
    raw = float(np.linalg.norm(_values(grad_cur) - _values(grad_prev)) / step)
    return _smoothed(raw, previous)


def estimate_lipschitz(
    w_prev: Vector,
    w_cur: Vector,
    loss_prev: float,
    loss_cur: float,
    previous: Optional[float] = None,
) -> float:
    """|F_cur - F_prev| / ||w_cur - w_prev||, smoothed like ``estimate_smoothness``."""
    step = np.linalg.norm(_values(w_cur) - _values(w_prev))
    if step == 0:
        return previous if previous is not None else 0.0
    return _smoothed(float(abs(loss_cur - loss_prev) / step), previous)


def divergence_gap(tau: int, delta: float, beta: float, lr: float) -> float:
    """h(tau) = (delta/beta)((lr*beta + 1)^tau - 1) - lr*delta*tau.

    Expanded as (delta/beta) * sum_{k>=2} C(tau, k) (lr*beta)^k so that h(1)
    is exactly zero and h never decreases in tau.
    """
    if beta < BETA_FLOOR or delta == 0:
        return 0.0
    x = lr * beta
    term, total = tau * x, 0.0
    for k in range(2, tau + 1):
        term *= (tau - k + 1) / k * x
        total += term
        if not math.isfinite(total):
            return math.inf
    return delta / beta * total


def choose_interval(
    estimates: AdaptiveEstimates,
    budget_state: BudgetState,
    lr: float,
    tau_max: int = DEFAULT_TAU_MAX,
    num_devices: int = 1,
) -> Union[IntervalDecision, Exhausted]:
    """Pick the tau in 1..tau_max with the lowest score (smallest tau on ties).

    score(tau) = 1 / (T(tau) * tau) + rho * h(tau) / tau with
    T(tau) = remaining / (tau * N * c_comp + c_comm) rounds left at that tau.
    """
    remaining = budget_state.remaining
    scores: Dict[int, float] = {}
    secondary: Dict[int, float] = {}
    for tau in range(1, tau_max + 1):
        per_round = tau * num_devices * estimates.c_comp + estimates.c_comm
        rounds_left = remaining / per_round if per_round > 0 else math.inf
        secondary[tau] = per_round / tau
        if rounds_left <= 0:
            scores[tau] = math.inf
            continue
        penalty = estimates.rho_hat * divergence_gap(
            tau, estimates.delta_hat, estimates.beta_hat, lr
        )
        if math.isinf(rounds_left):
            # unlimited budget: the progress term vanishes and only orders ties
            scores[tau] = penalty / tau
        else:
            scores[tau] = 1.0 / (rounds_left * tau) + penalty / tau
    finite = [t for t, s in scores.items() if math.isfinite(s)]
    if not finite:
        return Exhausted(remaining=remaining)
    if math.isinf(remaining):
        tau_star = min(finite, key=lambda t: (scores[t], secondary[t], t))
    else:
        tau_star = min(finite, key=lambda t: (scores[t], t))
    return IntervalDecision(tau_star=tau_star, candidate_scores=scores)


class AdaptiveOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParamVector
    taus: List[int]
    estimates: List[AdaptiveEstimates]


def _affordable_tau(fed: Federation, tau: int) -> int:
    """Largest tau up to the requested one whose round fits the budget, else 0."""
    state = fed.budget
    if state.affordable(tau, 1, fed.num_devices):
        return tau
    spare = state.remaining - state.budget.c_comm
    per_iteration = fed.num_devices * state.budget.c_comp
    return max(0, min(tau, int(math.floor(spare / per_iteration + 1e-12))))


def run_adaptive(
    fed: Federation,
    lr: float,
    batch_size: int,
    tau_max: int = DEFAULT_TAU_MAX,
    initial_tau: int = 1,
    max_rounds: Optional[int] = None,
    weighting: Weighting = "data",
    payload: Optional[PayloadMode] = None,
) -> AdaptiveOutcome:
    """FedAvg whose interval is re-chosen every round until the budget runs out.

    Devices upload their first-step minibatch gradient alongside their
    parameters; those gradients feed the estimates. ``initial_tau`` is used
    until a smoothness estimate exists.
    """
    if not fed.has_budget and max_rounds is None:
        raise InvalidArgumentError("adaptive runs need a cost budget or max_rounds")
    global_params = fed.init_params()
    tau = initial_tau
    taus: List[int] = []
    history: List[AdaptiveEstimates] = []
    beta: Optional[float] = None
    rho: Optional[float] = None
    prev = None
    round_idx = 0

    while max_rounds is None or round_idx < max_rounds:
        tau = _affordable_tau(fed, tau)
        if tau < 1 or fed.budget.exhausted:
            logger.info("budget exhausted after %d rounds", round_idx)
            break
        round_idx += 1
        outcome = fedavg_round(
            fed, global_params, round_idx, tau, lr, batch_size, weighting, payload
        )
        for device, local in zip(fed.devices, outcome.local):
            fed.upload(device, local.grad, round_idx, kind="gradient")

        weights = fed.weights(weighting)
        grads = [local.grad.values for local in outcome.local]
        mean_grad = weights @ np.stack(grads)
        mean_loss = float(weights @ np.array([local.loss for local in outcome.local]))
        delta = estimate_divergence(grads, weights) if fed.num_devices > 1 else 0.0
        if prev is not None:
            w_prev, g_prev, f_prev = prev
            beta = estimate_smoothness(w_prev, global_params, g_prev, mean_grad, beta)
            rho = estimate_lipschitz(w_prev, global_params, f_prev, mean_loss, rho)
        prev = (global_params, mean_grad, mean_loss)
        global_params = outcome.params

        consume_budget(fed.budget, tau, 1, [d.device_id for d in fed.devices])
        fed.record_model(round_idx, tau, global_params)
        taus.append(tau)

        estimates = AdaptiveEstimates(
            delta_hat=delta,
            beta_hat=beta or 0.0,
            rho_hat=rho or 0.0,
            c_comp=fed.budget.budget.c_comp,
            c_comm=fed.budget.budget.c_comm,
        )
        history.append(estimates)
        if beta is None:
            continue
        decision = choose_interval(estimates, fed.budget, lr, tau_max, fed.num_devices)
        if isinstance(decision, Exhausted):
            logger.info("no interval fits the remaining budget")
            break
        logger.debug("round %d scores %s", round_idx, decision.candidate_scores)
        tau = decision.tau_star

    return AdaptiveOutcome(params=global_params, taus=taus, estimates=history)
