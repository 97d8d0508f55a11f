"""Blockchained federated learning.

Devices upload to randomly assigned miners, miners verify and cross-share
what they accepted, then race a proof-of-work timer. The first miner to finish
aggregates every accepted update into the block that becomes the next global
model, and devices are rewarded in proportion to their accepted data.
"""

import logging
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from fogml.config import BLOCK_HEADER_BYTES, BLOCK_REWARD_BYTES, NORM_SCREEN_FACTOR
from fogml.core.exceptions import InvalidArgumentError
from fogml.core.models import ModelSpec, ParamVector
from fogml.netsim import consume_budget, device_node, miner_node
from fogml.protocols.fedavg import aggregate, local_update
from fogml.protocols.federation import Federation

logger = logging.getLogger(__name__)


class Update(BaseModel):
    """A device's upload as a miner receives it (possibly corrupted)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    device_id: int
    values: np.ndarray
    spec: ModelSpec
    num_samples: int = Field(..., ge=0, description="samples the device actually holds")
    declared_samples: int = Field(..., ge=0, description="samples the device claims")

    @property
    def params(self) -> ParamVector:
        return ParamVector(values=self.values, spec=self.spec)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


class Verdict(BaseModel):
    accepted: bool
    reason: Optional[str] = None


ACCEPT = Verdict(accepted=True)


def verify(update: Update, norm_bound: Optional[float] = None) -> Verdict:
    """Reject non-finite parameters, false data claims and oversized norms."""
    if not np.all(np.isfinite(update.values)):
        return Verdict(accepted=False, reason="non-finite")
    if update.declared_samples != update.num_samples:
        return Verdict(accepted=False, reason="data claim")
    if norm_bound is not None and update.norm > norm_bound:
        return Verdict(accepted=False, reason="norm")
    return ACCEPT


def screen(
    updates: Sequence[Update], factor: float = NORM_SCREEN_FACTOR
) -> List[Verdict]:
    """Two passes: per-update checks, then a norm bound of ``factor`` x the
    median norm of the first-pass survivors."""
    first = [verify(u) for u in updates]
    norms = [u.norm for u, v in zip(updates, first) if v.accepted]
    if not norms:
        return first
    bound = factor * float(np.median(norms))
    return [verify(u, bound) if v.accepted else v for u, v in zip(updates, first)]


class PowResult(BaseModel):
    winner: int
    pow_time: float
    times: Dict[int, float]


def pow_race(miners: Sequence[int], rate: float, rng) -> PowResult:
    """Every miner draws an Exponential(rate) finishing time; the earliest wins.

    Exact ties go to the lowest miner id. ``rng`` only needs ``exponential``.
    """
    if not miners:
        raise InvalidArgumentError("a proof-of-work race needs at least one miner")
    if rate <= 0:
        raise InvalidArgumentError("mining rate must be positive", rate=rate)
    ids = sorted(miners)
    times = np.asarray(rng.exponential(1.0 / rate, size=len(ids)), dtype=np.float64)
    best = int(np.argmin(times))
    return PowResult(
        winner=ids[best],
        pow_time=float(times[best]),
        times={m: float(t) for m, t in zip(ids, times)},
    )


def assign_miners(
    device_ids: Sequence[int], miners: Sequence[int], rng: np.random.Generator
) -> Dict[int, List[int]]:
    """Each device goes to one uniformly chosen miner."""
    if not miners:
        raise InvalidArgumentError("no active miners")
    ids = sorted(miners)
    picks = rng.integers(0, len(ids), size=len(device_ids))
    out: Dict[int, List[int]] = {m: [] for m in ids}
    for device_id, pick in zip(device_ids, picks):
        out[ids[int(pick)]].append(int(device_id))
    return out


class MinerState(BaseModel):
    miner_id: int
    devices: List[int] = Field(default_factory=list)
    collected: List[Update] = Field(default_factory=list)
    verdicts: List[Verdict] = Field(default_factory=list)

    @property
    def accepted(self) -> List[Update]:
        return [u for u, v in zip(self.collected, self.verdicts) if v.accepted]


class Block(BaseModel):
    round: int
    winner: int
    params: ParamVector
    pow_time: float
    rewards: Dict[int, float]

    def payload_bytes(self, wire_bytes: int) -> int:
        return (
            self.params.size * wire_bytes
            + BLOCK_REWARD_BYTES * len(self.rewards)
            + BLOCK_HEADER_BYTES
        )

    def log_row(self) -> Dict[str, object]:
        return {
            "round": self.round,
            "winner": self.winner,
            "pow_time": self.pow_time,
            "rewards": {str(k): v for k, v in self.rewards.items()},
        }


def rewards_for(updates: Sequence[Update], total: float) -> Dict[int, float]:
    """R * n_d / sum of accepted n."""
    mass = sum(u.num_samples for u in updates)
    if mass == 0:
        return {}
    return {u.device_id: total * u.num_samples / mass for u in updates}


Tamper = Callable[[Update], Update]


def blockfl_round(
    fed: Federation,
    global_params: ParamVector,
    round_idx: int,
    tau: int,
    lr: float,
    batch_size: int,
    num_miners: int,
    pow_rate: float = 1.0,
    reward_total: float = 1.0,
    failed_miners: Sequence[int] = (),
    tamper: Optional[Tamper] = None,
) -> Block:
    """One round; with every update rejected the block keeps the previous model."""
    active = [m for m in range(num_miners) if m not in set(failed_miners)]
    assignment = assign_miners(
        [d.device_id for d in fed.devices], active, fed.streams.get("miners", round_idx)
    )
    by_id = {d.device_id: d for d in fed.devices}
    states = {m: MinerState(miner_id=m, devices=devs) for m, devs in assignment.items()}

    for miner in states.values():
        for device_id in miner.devices:
            device = by_id[device_id]
            rng = fed.streams.device(device_id, round_idx)
            local = local_update(
                device.data, global_params, tau, lr, batch_size, rng
            ).params
            update = Update(
                device_id=device_id,
                values=local.values,
                spec=local.spec,
                num_samples=device.num_samples,
                declared_samples=device.num_samples,
            )
            if tamper is not None:
                update = tamper(update)
            fed.send(
                update.values,
                "uplink",
                round_idx,
                device.name,
                miner_node(miner.miner_id),
                kind="update",
            )
            miner.collected.append(update)
        miner.verdicts = [verify(u) for u in miner.collected]

    # cross-share first-pass survivors between miners
    for miner in states.values():
        for update in miner.accepted:
            for other in states:
                if other != miner.miner_id:
                    fed.send(
                        update.values,
                        "downlink",
                        round_idx,
                        miner_node(miner.miner_id),
                        miner_node(other),
                        kind="cross",
                    )

    pooled = sorted(
        (u for miner in states.values() for u in miner.accepted),
        key=lambda u: u.device_id,
    )
    verdicts = screen(pooled)
    accepted = [u for u, v in zip(pooled, verdicts) if v.accepted]
    rejected = len(fed.devices) - len(accepted)
    if rejected:
        logger.info("round %d: %d updates rejected", round_idx, rejected)

    race = pow_race(active, pow_rate, fed.streams.get("pow", round_idx))
    if accepted:
        params = aggregate([(u.params, u.num_samples) for u in accepted])
        rewards = rewards_for(accepted, reward_total)
    else:
        logger.warning(
            "round %d: every update rejected, keeping the previous model", round_idx
        )
        params, rewards = global_params, {}
    block = Block(
        round=round_idx,
        winner=race.winner,
        params=params,
        pow_time=race.pow_time,
        rewards=rewards,
    )
    for device in fed.devices:
        fed.send(
            block,
            "downlink",
            round_idx,
            miner_node(race.winner),
            device_node(device.device_id),
            kind="block",
        )
    return block


class BlockFlOutcome(BaseModel):
    params: ParamVector
    blocks: List[Block]


def run_blockfl(
    fed: Federation,
    rounds: int,
    tau: int,
    lr: float,
    batch_size: int,
    num_miners: int,
    pow_rate: float = 1.0,
    reward_total: float = 1.0,
    failed_miners: Sequence[int] = (),
    tamper: Optional[Tamper] = None,
) -> BlockFlOutcome:
    global_params = fed.init_params()
    blocks: List[Block] = []
    for round_idx in fed.rounds(rounds, desc="blockfl"):
        if not fed.budget.affordable(tau, 1, fed.num_devices):
            logger.info("budget exhausted after %d rounds", round_idx - 1)
            break
        block = blockfl_round(
            fed,
            global_params,
            round_idx,
            tau,
            lr,
            batch_size,
            num_miners,
            pow_rate,
            reward_total,
            failed_miners,
            tamper,
        )
        blocks.append(block)
        global_params = block.params
        consume_budget(fed.budget, tau, 1, [d.device_id for d in fed.devices])
        fed.record_model(round_idx, tau, global_params)
    return BlockFlOutcome(params=global_params, blocks=blocks)
