"""Server-less group ADMM on a chain, plus a decentralized gradient descent baseline.

Devices sit on a chain ``order[0] - order[1] - ... - order[N-1]``. Edge ``e``
joins positions ``e`` (left) and ``e + 1`` (right) and carries the constraint
``theta_left = theta_right`` with dual variable ``lambda_e``. The augmented
Lagrangian is

    sum_n f_n(theta_n) + sum_e lambda_e . (theta_left - theta_right)
                       + rho / 2 * sum_e ||theta_left - theta_right||^2

Heads (even positions) update first from the tails' previous values and
broadcast; tails then update from the fresh heads and broadcast; finally every
edge takes a dual ascent step.
"""

import logging
import math
from typing import Callable, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fogml.config import DEFAULT_INNER_STEPS, DEFAULT_RHO, DEFAULT_WIRE_BYTES
from fogml.core import nn
from fogml.core.exceptions import (
    DimensionMismatchError,
    InvalidArgumentError,
    SingularSystemError,
)
from fogml.core.models import Dataset, ModelSpec
from fogml.netsim import LinkSpec, PayloadLedger, charge, device_node

logger = logging.getLogger(__name__)


class Objective(Protocol):
    """A device's local objective f_n over a flat parameter vector."""

    @property
    def dim(self) -> int:
        ...

    def value(self, theta: np.ndarray) -> float:
        ...

    def grad(self, theta: np.ndarray) -> np.ndarray:
        ...

    def prox(
        self,
        theta: np.ndarray,
        linear: np.ndarray,
        neighbor_sum: np.ndarray,
        degree: int,
        rho: float,
    ) -> np.ndarray:
        """argmin f(x) + linear . x + rho/2 * sum_m ||x - theta_m||^2.

        Iterative solvers warm-start at ``theta``.
        """
        ...


class QuadraticObjective:
    """f(theta) = 1/2 theta^T H theta - g^T theta + c with H positive semidefinite."""

    def __init__(
        self, hessian: np.ndarray, linear: np.ndarray, constant: float = 0.0
    ) -> None:
        self.hessian = np.atleast_2d(np.asarray(hessian, dtype=np.float64))
        self.linear = np.atleast_1d(np.asarray(linear, dtype=np.float64))
        self.constant = float(constant)
        if self.hessian.shape != (self.dim, self.dim):
            raise DimensionMismatchError(
                (self.dim, self.dim), self.hessian.shape, what="hessian"
            )

    @classmethod
    def from_least_squares(
        cls, rows: np.ndarray, targets: np.ndarray
    ) -> "QuadraticObjective":
        """1/2 ||A theta - y||^2."""
        a = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        y = np.asarray(targets, dtype=np.float64).reshape(-1)
        return cls(a.T @ a, a.T @ y, 0.5 * float(y @ y))

    @property
    def dim(self) -> int:
        return int(self.linear.shape[0])

    def value(self, theta: np.ndarray) -> float:
        quadratic = 0.5 * theta @ self.hessian @ theta
        return float(quadratic - self.linear @ theta + self.constant)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.hessian @ theta - self.linear

    def prox(self, theta, linear, neighbor_sum, degree, rho):
        system = self.hessian + rho * degree * np.eye(self.dim)
        rhs = self.linear - linear + rho * neighbor_sum
        try:
            return scipy.linalg.solve(system, rhs, assume_a="sym")
        except (scipy.linalg.LinAlgError, ValueError) as exc:
            raise SingularSystemError(
                "primal system is singular", rho=rho, degree=degree
            ) from exc


class LogisticObjective:
    """Mean cross-entropy of a model on one device's data.

    The primal step is inexact: ``inner_steps`` gradient steps with step size
    1 / (beta_f + rho * degree), where beta_f bounds the loss smoothness.
    """

    def __init__(
        self, data: Dataset, spec: ModelSpec, inner_steps: int = DEFAULT_INNER_STEPS
    ) -> None:
        self.data = data
        self.spec = spec
        self.inner_steps = inner_steps
        # softmax cross-entropy Hessian norm <= 1/2 * mean ||[x, 1]||^2
        self.smoothness = 0.5 * float(np.mean(np.sum(data.features**2, axis=1) + 1.0))

    @property
    def dim(self) -> int:
        return self.spec.num_params

    def value(self, theta: np.ndarray) -> float:
        loss, _, _ = self._evaluate(theta)
        return loss

    def grad(self, theta: np.ndarray) -> np.ndarray:
        _, grad, _ = self._evaluate(theta)
        return grad

    def _evaluate(self, theta: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        features, labels = self.data.features, self.data.labels
        return nn.loss_and_grad_values(theta, self.spec, features, labels)

    def prox(self, theta, linear, neighbor_sum, degree, rho):
        lr = 1.0 / (self.smoothness + rho * degree)
        x = theta.copy()
        for _ in range(self.inner_steps):
            x = x - lr * (self.grad(x) + linear + rho * (degree * x - neighbor_sum))
        return x


class ChainAssignment(BaseModel):
    order: List[int] = Field(..., description="device ids along the chain")

    @model_validator(mode="after")
    def _check(self) -> "ChainAssignment":
        if len(self.order) < 2:
            raise ValueError("a chain needs at least two devices")
        if len(set(self.order)) != len(self.order):
            raise ValueError("chain order repeats a device")
        return self

    @property
    def size(self) -> int:
        return len(self.order)

    @property
    def heads(self) -> List[int]:
        return self.order[0::2]

    @property
    def tails(self) -> List[int]:
        return self.order[1::2]

    def neighbor_positions(self, pos: int) -> List[int]:
        return [p for p in (pos - 1, pos + 1) if 0 <= p < self.size]


def assign_groups(
    device_ids: Sequence[int], order: Optional[Sequence[int]] = None
) -> ChainAssignment:
    """Chain in id order (or ``order``), alternating head/tail starting with a head."""
    if len(device_ids) < 2:
        raise InvalidArgumentError(
            "group ADMM needs at least two devices", devices=len(device_ids)
        )
    chain = list(order) if order is not None else sorted(device_ids)
    if sorted(chain) != sorted(device_ids):
        raise InvalidArgumentError("chain order must be a permutation of the devices")
    return ChainAssignment(order=chain)


class GadmmState(BaseModel):
    """Primal values by chain position and one dual vector per edge."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    thetas: np.ndarray = Field(..., description="N x P")
    lambdas: np.ndarray = Field(..., description="(N - 1) x P")
    rho: float = Field(..., gt=0)

    @model_validator(mode="after")
    def _check(self) -> "GadmmState":
        n, p = self.thetas.shape
        if self.lambdas.shape != (n - 1, p):
            raise ValueError("one dual vector per chain edge is required")
        if not (np.all(np.isfinite(self.thetas)) and np.all(np.isfinite(self.lambdas))):
            raise ValueError("ADMM state must be finite")
        return self

    @classmethod
    def zeros(
        cls, num_devices: int, dim: int, rho: float = DEFAULT_RHO
    ) -> "GadmmState":
        return cls(
            thetas=np.zeros((num_devices, dim)),
            lambdas=np.zeros((num_devices - 1, dim)),
            rho=rho,
        )

    def max_residual(self) -> float:
        """Largest edge disagreement in the max norm."""
        return float(np.max(np.abs(np.diff(self.thetas, axis=0))))


def primal_update(
    pos: int,
    thetas: np.ndarray,
    lambdas: np.ndarray,
    rho: float,
    objective: Objective,
) -> np.ndarray:
    """Minimize the augmented Lagrangian over the device at chain position ``pos``."""
    n = thetas.shape[0]
    linear = np.zeros(thetas.shape[1])
    neighbor_sum = np.zeros(thetas.shape[1])
    degree = 0
    if pos < n - 1:
        linear += lambdas[pos]
        neighbor_sum += thetas[pos + 1]
        degree += 1
    if pos > 0:
        linear -= lambdas[pos - 1]
        neighbor_sum += thetas[pos - 1]
        degree += 1
    return objective.prox(thetas[pos], linear, neighbor_sum, degree, rho)


def dual_update(state: GadmmState) -> GadmmState:
    """lambda_e += rho * (theta_left - theta_right) on every edge."""
    lambdas = state.lambdas + state.rho * (state.thetas[:-1] - state.thetas[1:])
    return state.model_copy(update={"lambdas": lambdas})


class GadmmRound(BaseModel):
    round: int
    max_residual: float
    primal_change: float
    objective: float


class GadmmResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    state: GadmmState
    history: List[GadmmRound]
    converged: bool

    @property
    def consensus(self) -> np.ndarray:
        return self.state.thetas.mean(axis=0)


RoundHook = Callable[[int, np.ndarray], None]


class _Broadcaster:
    """Charges chain broadcasts; a no-op without a ledger."""

    def __init__(
        self,
        chain: ChainAssignment,
        ledger: Optional[PayloadLedger],
        link: Optional[LinkSpec],
        wire_bytes: int,
    ) -> None:
        if ledger is not None and link is None:
            raise InvalidArgumentError("charging broadcasts needs a link")
        self.chain, self.ledger = chain, ledger
        self.link, self.wire_bytes = link, wire_bytes

    def send(
        self, round_idx: int, positions: Sequence[int], thetas: np.ndarray
    ) -> None:
        if self.ledger is None:
            return
        for pos in positions:
            neighbors = self.chain.neighbor_positions(pos)
            dst = "+".join(device_node(self.chain.order[p]) for p in neighbors)
            charge(
                self.ledger,
                self.link,
                thetas[pos],
                "uplink",
                round_idx,
                device_node(self.chain.order[pos]),
                dst,
                wire_bytes=self.wire_bytes,
                kind="theta",
            )


def _total(objectives: Sequence[Objective], theta: np.ndarray) -> float:
    return float(sum(f.value(theta) for f in objectives))


def run_gadmm(
    objectives: Sequence[Objective],
    rho: float = DEFAULT_RHO,
    max_rounds: int = 500,
    tol: float = 1e-6,
    chain: Optional[ChainAssignment] = None,
    theta0: Optional[np.ndarray] = None,
    ledger: Optional[PayloadLedger] = None,
    link: Optional[LinkSpec] = None,
    wire_bytes: int = DEFAULT_WIRE_BYTES,
    on_round: Optional[RoundHook] = None,
) -> GadmmResult:
    """Run group ADMM; ``objectives[i]`` belongs to chain position i.

    Stops once every edge residual and every primal change is within ``tol``;
    otherwise returns after ``max_rounds`` flagged unconverged.
    """
    n = len(objectives)
    chain = chain or assign_groups(list(range(n)))
    if chain.size != n:
        raise DimensionMismatchError(n, chain.size, what="chain length")
    dim = objectives[0].dim
    state = GadmmState.zeros(n, dim, rho)
    if theta0 is not None:
        start = np.tile(np.asarray(theta0, dtype=np.float64), (n, 1))
        state = state.model_copy(update={"thetas": start})
    heads = list(range(0, n, 2))
    tails = list(range(1, n, 2))
    wire = _Broadcaster(chain, ledger, link, wire_bytes)
    history: List[GadmmRound] = []
    converged = False

    for round_idx in range(1, max_rounds + 1):
        before = state.thetas
        thetas = before.copy()
        for group in (heads, tails):
            fresh = {
                p: primal_update(p, thetas, state.lambdas, rho, objectives[p])
                for p in group
            }
            for p, value in fresh.items():
                thetas[p] = value
            wire.send(round_idx, group, thetas)
        state = dual_update(state.model_copy(update={"thetas": thetas}))

        residual = state.max_residual()
        change = float(np.max(np.abs(thetas - before)))
        history.append(
            GadmmRound(
                round=round_idx,
                max_residual=residual,
                primal_change=change,
                objective=_total(objectives, thetas.mean(axis=0)),
            )
        )
        if on_round is not None:
            on_round(round_idx, thetas)
        if residual <= tol and change <= tol:
            converged = True
            break

    if not converged:
        logger.warning(
            "group ADMM did not converge in %d rounds (residual %.3g)",
            max_rounds,
            history[-1].max_residual,
        )
    return GadmmResult(state=state, history=history, converged=converged)


def metropolis_weights(num_devices: int) -> np.ndarray:
    """Symmetric doubly stochastic mixing matrix for a chain."""
    degree = np.array([(i > 0) + (i < num_devices - 1) for i in range(num_devices)])
    w = np.zeros((num_devices, num_devices))
    for i in range(num_devices - 1):
        w[i, i + 1] = w[i + 1, i] = 1.0 / (1 + max(degree[i], degree[i + 1]))
    w[np.diag_indices(num_devices)] = 1.0 - w.sum(axis=1)
    return w


def run_dgd(
    objectives: Sequence[Objective],
    step: float,
    max_rounds: int = 500,
    tol: float = 1e-6,
    chain: Optional[ChainAssignment] = None,
    theta0: Optional[np.ndarray] = None,
    ledger: Optional[PayloadLedger] = None,
    link: Optional[LinkSpec] = None,
    wire_bytes: int = DEFAULT_WIRE_BYTES,
    on_round: Optional[RoundHook] = None,
) -> GadmmResult:
    """Decentralized gradient descent on the same chain.

    Every device mixes its neighbors' values with Metropolis weights and then
    takes a local gradient step of size step / sqrt(k). Every device
    broadcasts every round. The returned state carries zero duals.
    """
    n = len(objectives)
    chain = chain or assign_groups(list(range(n)))
    dim = objectives[0].dim
    if theta0 is None:
        thetas = np.zeros((n, dim))
    else:
        thetas = np.tile(np.asarray(theta0, dtype=np.float64), (n, 1))
    mixing = metropolis_weights(n)
    wire = _Broadcaster(chain, ledger, link, wire_bytes)
    history: List[GadmmRound] = []
    converged = False

    for round_idx in range(1, max_rounds + 1):
        wire.send(round_idx, range(n), thetas)
        eta = step / math.sqrt(round_idx)
        grads = np.stack([f.grad(thetas[p]) for p, f in enumerate(objectives)])
        updated = mixing @ thetas - eta * grads
        change = float(np.max(np.abs(updated - thetas)))
        thetas = updated
        residual = float(np.max(np.abs(np.diff(thetas, axis=0))))
        history.append(
            GadmmRound(
                round=round_idx,
                max_residual=residual,
                primal_change=change,
                objective=_total(objectives, thetas.mean(axis=0)),
            )
        )
        if on_round is not None:
            on_round(round_idx, thetas)
        if residual <= tol and change <= tol:
            converged = True
            break

    state = GadmmState(thetas=thetas, lambdas=np.zeros((n - 1, dim)), rho=1.0)
    return GadmmResult(state=state, history=history, converged=converged)


def centralized_solution(objectives: Sequence[QuadraticObjective]) -> np.ndarray:
    """Minimizer of sum_n f_n via the normal equations."""
    if not all(isinstance(f, QuadraticObjective) for f in objectives):
        raise InvalidArgumentError("a closed-form solution needs quadratic objectives")
    hessian = sum(f.hessian for f in objectives)
    linear = sum(f.linear for f in objectives)
    try:
        return scipy.linalg.solve(hessian, linear, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError("summed objective is singular") from exc
