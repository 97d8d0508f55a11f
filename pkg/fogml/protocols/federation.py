"""Shared run context: devices, network, budget and metrics of one simulation."""

import logging
import math
from typing import Any, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel
from tqdm import tqdm

from fogml.config import (
    DEFAULT_C_COMM,
    DEFAULT_C_COMP,
    DEFAULT_WIRE_BYTES,
    METRICS_COLUMNS,
    SERVER,
    Direction,
    Weighting,
)
from fogml.core import nn
from fogml.core.exceptions import InvalidArgumentError
from fogml.core.models import Dataset, LocalDataset, ModelSpec, ParamVector
from fogml.core.rng import StreamFactory
from fogml.netsim import (
    BudgetState,
    CostBudget,
    LinkSpec,
    PayloadLedger,
    Topology,
    charge,
    device_node,
)

logger = logging.getLogger(__name__)


class Device:
    """One simulated device: its local data plus protocol-private state."""

    def __init__(self, data: LocalDataset) -> None:
        self.data = data
        self.params: Optional[ParamVector] = None
        self.residual: Optional[np.ndarray] = None

    @property
    def device_id(self) -> int:
        return self.data.device_id

    @property
    def name(self) -> str:
        return device_node(self.device_id)

    @property
    def num_samples(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Device({self.name}, n={self.num_samples})"


class MetricsRow(BaseModel):
    round: int
    tau: int
    cum_uplink_bits: int
    cum_downlink_bits: int
    cum_cost: float
    train_loss: float
    test_acc: float
    sim_time: float


class Federation:
    """Everything a protocol engine needs to run.

    Holds the devices, the held-out test set, the payload ledger, the cost
    accounting and the per-round metrics. Without a configured budget, costs
    are still accumulated with unit computation and tenfold communication cost
    against an unlimited total.
    """

    def __init__(
        self,
        devices: Sequence[LocalDataset],
        test: Dataset,
        spec: ModelSpec,
        streams: StreamFactory,
        link: LinkSpec,
        topology: Optional[Topology] = None,
        wire_bytes: int = DEFAULT_WIRE_BYTES,
        budget: Optional[CostBudget] = None,
        progress: bool = False,
    ) -> None:
        if not devices:
            raise InvalidArgumentError("a federation needs at least one device")
        self.devices: List[Device] = [Device(d) for d in devices]
        self.test = test
        self.spec = spec
        self.streams = streams
        self.link = link
        self.topology = topology or Topology(kind="star", num_devices=len(devices))
        self.wire_bytes = wire_bytes
        self.has_budget = budget is not None
        self.budget = BudgetState(
            budget=budget
            or CostBudget(c_comp=DEFAULT_C_COMP, c_comm=DEFAULT_C_COMM, total=math.inf)
        )
        self.ledger = PayloadLedger()
        self.metrics: List[MetricsRow] = []
        self.progress = progress
        self._pool: Optional[Dataset] = None

    @property
    def num_devices(self) -> int:
        return len(self.devices)

    @property
    def train_pool(self) -> Dataset:
        """Union of all devices' local data."""
        if self._pool is None:
            pool = self.devices[0].data
            for device in self.devices[1:]:
                pool = pool.concat(device.data)
            self._pool = pool
        return self._pool

    def replace_data(self, index: int, data: LocalDataset) -> None:
        self.devices[index].data = data
        self._pool = None

    def weights(self, weighting: Weighting = "data") -> np.ndarray:
        """Normalized aggregation weights, one per device."""
        if weighting == "uniform":
            raw = np.ones(self.num_devices)
        else:
            raw = np.array([d.num_samples for d in self.devices], dtype=np.float64)
        return raw / raw.sum()

    def init_params(self) -> ParamVector:
        return nn.init_params(self.spec, self.streams.get("init"))

    def send(
        self,
        message: Any,
        direction: Direction,
        round_idx: int,
        src: str,
        dst: str,
        kind: Optional[str] = None,
    ) -> float:
        return charge(
            self.ledger,
            self.link,
            message,
            direction,
            round_idx,
            src,
            dst,
            wire_bytes=self.wire_bytes,
            kind=kind,
        )

    def upload(
        self, device: Device, message: Any, round_idx: int, kind: Optional[str] = None
    ) -> float:
        return self.send(message, "uplink", round_idx, device.name, SERVER, kind)

    def broadcast(
        self, message: Any, round_idx: int, kind: Optional[str] = None
    ) -> float:
        """Server-to-every-device downlink, charged once per device."""
        return max(
            self.send(message, "downlink", round_idx, SERVER, d.name, kind)
            for d in self.devices
        )

    def rounds(self, count: int, desc: str = "rounds") -> Iterator[int]:
        yield from tqdm(range(1, count + 1), desc=desc, disable=not self.progress)

    def train_loss(self, params: ParamVector) -> float:
        return nn.mean_loss(params, self.train_pool)

    def test_accuracy(self, params: ParamVector) -> float:
        return nn.evaluate(params, self.test)

    def record(
        self, round_idx: int, tau: int, train_loss: float, test_acc: float
    ) -> MetricsRow:
        row = MetricsRow(
            round=round_idx,
            tau=tau,
            cum_uplink_bits=self.ledger.total_bits("uplink"),
            cum_downlink_bits=self.ledger.total_bits("downlink"),
            cum_cost=self.budget.consumed,
            train_loss=train_loss,
            test_acc=test_acc,
            sim_time=self.ledger.elapsed(),
        )
        self.metrics.append(row)
        logger.info(
            "round %d tau=%d loss=%.4f acc=%.4f", round_idx, tau, train_loss, test_acc
        )
        return row

    def record_model(self, round_idx: int, tau: int, params: ParamVector) -> MetricsRow:
        return self.record(
            round_idx, tau, self.train_loss(params), self.test_accuracy(params)
        )

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [m.model_dump() for m in self.metrics], columns=list(METRICS_COLUMNS)
        )

