"""Simulated network: topologies, link capacities, payload ledger and cost budget.

Simulated time is measured in rounds: a message of ``b`` bits crossing a link
with capacity ``C`` bits per round occupies it for ``b / C`` rounds. Links used
within one round operate in parallel, so the round lasts as long as its
slowest transmission in each direction.
"""

import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from fogml.config import (
    DEFAULT_WIRE_BYTES,
    LEDGER_COLUMNS,
    QUANT_HEADER_BYTES,
    SERVER,
    SPARSE_INDEX_BYTES,
    Direction,
)
from fogml.core.exceptions import InvalidArgumentError, UnknownMessageError
from fogml.core.models import (
    CsrSample,
    LogitTable,
    ParamVector,
    QuantizedParams,
    SdiVector,
    SeedBatch,
    SparseParams,
)

logger = logging.getLogger(__name__)


def device_node(device_id: int) -> str:
    return f"d{device_id}"


def miner_node(miner_id: int) -> str:
    return f"m{miner_id}"


class Topology(BaseModel):
    """Who talks to whom.

    * ``star``: every device links to the server.
    * ``chain``: device i links to device i + 1; there is no server.
    * ``multihop_star``: devices form branches of ``hops`` consecutive devices;
      each device forwards to the next one in its branch and the last device of
      a branch links to the server.
    """

    kind: Literal["star", "chain", "multihop_star"]
    num_devices: int = Field(..., ge=1)
    hops: int = Field(1, ge=1, description="devices per branch (multihop_star)")

    @property
    def devices(self) -> List[str]:
        return [device_node(i) for i in range(self.num_devices)]

    @property
    def nodes(self) -> List[str]:
        if self.kind == "chain":
            return self.devices
        return self.devices + [SERVER]

    def branches(self) -> List[List[int]]:
        """Device ids grouped by the branch that carries them to the server."""
        if self.kind == "star":
            return [[i] for i in range(self.num_devices)]
        if self.kind == "chain":
            return [list(range(self.num_devices))]
        return [
            list(range(start, min(start + self.hops, self.num_devices)))
            for start in range(0, self.num_devices, self.hops)
        ]

    def edges(self) -> List[Tuple[str, str]]:
        if self.kind == "star":
            return [(d, SERVER) for d in self.devices]
        out = []
        for branch in self.branches():
            for a, b in zip(branch, branch[1:]):
                out.append((device_node(a), device_node(b)))
            if self.kind == "multihop_star":
                out.append((device_node(branch[-1]), SERVER))
        return out

    def neighbors(self, node: str) -> List[str]:
        found = []
        for a, b in self.edges():
            if a == node:
                found.append(b)
            elif b == node:
                found.append(a)
        return found

    def route_to_server(self, device_id: int) -> List[str]:
        """Nodes a device's upload traverses, ending at the server."""
        if self.kind == "chain":
            raise InvalidArgumentError("a chain topology has no server")
        for branch in self.branches():
            if device_id in branch:
                pos = branch.index(device_id)
                return [device_node(i) for i in branch[pos + 1 :]] + [SERVER]
        raise InvalidArgumentError("unknown device", device_id=device_id)

    def is_connected(self) -> bool:
        nodes = self.nodes
        seen = {nodes[0]}
        frontier = [nodes[0]]
        while frontier:
            node = frontier.pop()
            for other in self.neighbors(node):
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        return len(seen) == len(nodes)


class LinkSpec(BaseModel):
    uplink_bits_per_round: float = Field(..., gt=0)
    downlink_bits_per_round: float = Field(..., gt=0)

    def capacity(self, direction: Direction) -> float:
        if direction == "uplink":
            return self.uplink_bits_per_round
        return self.downlink_bits_per_round


def payload_bytes(message: Any, wire_bytes: int = DEFAULT_WIRE_BYTES) -> int:
    """Bytes a message occupies on the wire.

    Objects outside the built-in message types may define
    ``payload_bytes(wire_bytes)`` themselves.
    """
    if isinstance(message, ParamVector):
        return message.size * wire_bytes
    if isinstance(message, QuantizedParams):
        return math.ceil(message.codes.size * message.bits / 8) + QUANT_HEADER_BYTES
    if isinstance(message, SparseParams):
        return int(message.indices.size) * (wire_bytes + SPARSE_INDEX_BYTES)
    if isinstance(message, LogitTable):
        return message.num_labels * message.num_labels * wire_bytes
    if isinstance(message, SdiVector):
        return math.ceil(len(message) / 8)
    if isinstance(message, SeedBatch):
        samples = message.samples
        return len(samples) * samples.input_dim * wire_bytes
    if isinstance(message, CsrSample):
        return message.payload_bytes()
    if isinstance(message, np.ndarray):
        return int(message.size) * wire_bytes
    if isinstance(message, (list, tuple)):
        return sum(payload_bytes(part, wire_bytes) for part in message)
    sizer = getattr(message, "payload_bytes", None)
    if callable(sizer):
        return int(sizer(wire_bytes))
    raise UnknownMessageError(
        "no byte model for message", kind=type(message).__name__
    )


class LedgerEntry(BaseModel):
    round: int = Field(..., ge=0)
    src: str
    dst: str
    direction: Direction
    bytes: int = Field(..., ge=0)
    sim_time: float = Field(..., ge=0, description="rounds the transmission occupies")
    kind: str = ""


class PayloadLedger:
    """Append-only record of every transmission in a run."""

    def __init__(self) -> None:
        self._entries: List[LedgerEntry] = []
        self._totals: Dict[str, int] = {"uplink": 0, "downlink": 0}

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> Tuple[LedgerEntry, ...]:
        return tuple(self._entries)

    def append(self, entry: LedgerEntry) -> None:
        self._entries.append(entry)
        self._totals[entry.direction] += entry.bytes

    def total_bytes(self, direction: Optional[Direction] = None) -> int:
        if direction is None:
            return self._totals["uplink"] + self._totals["downlink"]
        return self._totals[direction]

    def total_bits(self, direction: Optional[Direction] = None) -> int:
        return 8 * self.total_bytes(direction)

    def select(
        self,
        round: Optional[int] = None,
        direction: Optional[Direction] = None,
        kind: Optional[str] = None,
        src: Optional[str] = None,
    ) -> List[LedgerEntry]:
        return [
            e
            for e in self._entries
            if (round is None or e.round == round)
            and (direction is None or e.direction == direction)
            and (kind is None or e.kind == kind)
            and (src is None or e.src == src)
        ]

    def bytes_by_node(self, direction: Optional[Direction] = None) -> Dict[str, int]:
        """Bytes sent per source node."""
        out: Dict[str, int] = defaultdict(int)
        for e in self._entries:
            if direction is None or e.direction == direction:
                out[e.src] += e.bytes
        return dict(out)

    def elapsed(self, through_round: Optional[int] = None) -> float:
        longest: Dict[Tuple[int, str], float] = {}
        for e in self._entries:
            if through_round is not None and e.round > through_round:
                continue
            key = (e.round, e.direction)
            longest[key] = max(longest.get(key, 0.0), e.sim_time)
        return float(sum(longest.values()))

    def to_dataframe(self, with_kind: bool = False) -> pd.DataFrame:
        columns = list(LEDGER_COLUMNS) + (["kind"] if with_kind else [])
        rows = [e.model_dump(include=set(columns)) for e in self._entries]
        return pd.DataFrame(rows, columns=columns)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_dataframe().to_csv(path, index=False)


def charge(
    ledger: PayloadLedger,
    link: LinkSpec,
    message: Any,
    direction: Direction,
    round: int,
    src: str,
    dst: str,
    wire_bytes: int = DEFAULT_WIRE_BYTES,
    kind: Optional[str] = None,
) -> float:
    """Record one transmission and return the simulated time it takes."""
    size = payload_bytes(message, wire_bytes)
    delta = 8.0 * size / link.capacity(direction)
    ledger.append(
        LedgerEntry(
            round=round,
            src=src,
            dst=dst,
            direction=direction,
            bytes=size,
            sim_time=delta,
            kind=kind or type(message).__name__,
        )
    )
    logger.debug("round %d %s %s->%s %d bytes", round, direction, src, dst, size)
    return delta


class CostBudget(BaseModel):
    """Computation/communication cost model (dimensionless units)."""

    c_comp: float = Field(..., gt=0, description="cost per local iteration per device")
    c_comm: float = Field(..., gt=0, description="cost per communication round")
    total: float = Field(..., gt=0)


class Exhausted(BaseModel):
    """Terminal budget state; ``remaining`` is zero or negative."""

    remaining: float


class BudgetState(BaseModel):
    budget: CostBudget
    consumed: float = 0.0
    per_device: Dict[int, float] = Field(default_factory=dict)

    @property
    def remaining(self) -> float:
        return self.budget.total - self.consumed

    @property
    def exhausted(self) -> bool:
        return self.remaining <= 0

    def cost(self, iterations: int, rounds: int, devices: int = 1) -> float:
        return iterations * self.budget.c_comp * devices + rounds * self.budget.c_comm

    def affordable(self, iterations: int, rounds: int, devices: int = 1) -> bool:
        return self.cost(iterations, rounds, devices) <= self.remaining + 1e-12


def _device_ids(devices: Union[int, Sequence[int]]) -> List[int]:
    if isinstance(devices, int):
        return list(range(devices))
    return [int(d) for d in devices]


def consume_budget(
    state: BudgetState,
    iterations: int,
    rounds: int,
    devices: Union[int, Iterable[int]] = 1,
) -> Union[float, Exhausted]:
    """Charge ``iterations`` local steps on every active device plus ``rounds``.

    Returns the remaining budget, or ``Exhausted`` once it reaches zero.
    """
    if iterations < 0 or rounds < 0:
        raise InvalidArgumentError(
            "usage must be non-negative", iterations=iterations, rounds=rounds
        )
    active = _device_ids(devices if isinstance(devices, int) else list(devices))
    for device_id in active:
        state.per_device[device_id] = (
            state.per_device.get(device_id, 0.0) + iterations * state.budget.c_comp
        )
    state.consumed += state.cost(iterations, rounds, len(active))
    if state.exhausted:
        return Exhausted(remaining=state.remaining)
    return state.remaining
