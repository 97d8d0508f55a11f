"""Protocol processes the Simulator dispatches to."""

import logging
from typing import Any, Dict, List, Optional, Tuple, Type

import numpy as np
from pydantic import BaseModel, Field

from fogml.core.exceptions import ConfigError
from fogml.core.models import ParamVector
from fogml.netsim import consume_budget
from fogml.protocols import adaptive, blockfl, distill, faug, fedavg, gadmm
from fogml.protocols.federation import Federation
from fogml.sim.settings import ExperimentConfig

try:
    from typing import Protocol
except ImportError:
    from typing_extensions import Protocol

logger = logging.getLogger(__name__)


class ProcessOutput(BaseModel):
    """Protocol-specific results beyond the per-round metrics."""

    extras: Dict[str, Any] = Field(default_factory=dict)
    privacy: Optional[faug.PrivacyReport] = None
    blocks: List[blockfl.Block] = Field(default_factory=list)


class Process(Protocol):
    """Process primitive protocol."""

    id: str

    def first_round(self, config: ExperimentConfig) -> Tuple[int, int]:
        """(local iterations per device, communication rounds) of round one."""
        ...

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        ...


class _Periodic:
    """Rounds of ``training.tau`` local iterations followed by one exchange."""

    id = ""

    def first_round(self, config: ExperimentConfig) -> Tuple[int, int]:
        return config.training.tau, 1


class FedAvgProcess(_Periodic):
    id = "fedavg"

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        t = config.training
        fedavg.run_fedavg(
            fed, t.rounds, t.tau, t.lr, t.batch_size, t.weighting, t.payload
        )
        return ProcessOutput()


class LocalProcess:
    """Isolated local training; nothing is transmitted."""

    id = "local"

    def first_round(self, config: ExperimentConfig) -> Tuple[int, int]:
        return config.training.tau, 0

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        t = config.training
        fedavg.run_local(fed, t.rounds, t.tau, t.lr, t.batch_size)
        return ProcessOutput()


class AdaptiveProcess:
    id = "adaptive"

    def first_round(self, config: ExperimentConfig) -> Tuple[int, int]:
        return config.adaptive.initial_tau, 1

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        a, t = config.adaptive, config.training
        # without a finite budget the run is bounded by the round count
        max_rounds = a.max_rounds or (t.rounds if config.unlimited else None)
        outcome = adaptive.run_adaptive(
            fed,
            t.lr,
            t.batch_size,
            tau_max=a.tau_max,
            initial_tau=a.initial_tau,
            max_rounds=max_rounds,
            weighting=t.weighting,
            payload=t.payload,
        )
        return ProcessOutput(extras={"taus": outcome.taus})


class GadmmProcess:
    """Group ADMM on device-local logistic objectives over a chain."""

    id = "gadmm"

    def first_round(self, config: ExperimentConfig) -> Tuple[int, int]:
        return 1, 1

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        g = config.gadmm
        ids = [d.device_id for d in fed.devices]
        objectives = [
            gadmm.LogisticObjective(d.data, fed.spec, inner_steps=g.inner_steps)
            for d in fed.devices
        ]

        def on_round(round_idx: int, thetas: np.ndarray) -> None:
            consume_budget(fed.budget, 1, 1, ids)
            consensus = ParamVector(values=thetas.mean(axis=0), spec=fed.spec)
            fed.record_model(round_idx, 1, consensus)

        result = gadmm.run_gadmm(
            objectives,
            rho=g.rho,
            max_rounds=g.max_rounds,
            tol=g.tol,
            chain=gadmm.assign_groups(ids),
            ledger=fed.ledger,
            link=fed.link,
            wire_bytes=fed.wire_bytes,
            on_round=on_round,
        )
        last = result.history[-1]
        return ProcessOutput(
            extras={
                "converged": result.converged,
                "admm_rounds": len(result.history),
                "max_residual": last.max_residual,
                "objective": last.objective,
            }
        )


class FdProcess(_Periodic):
    id = "fd"

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        t, d = config.training, config.distill
        distill.run_fd(fed, t.rounds, t.tau, t.lr, t.batch_size, d.alpha, d.temperature)
        return ProcessOutput()


class FldProcess(_Periodic):
    id = "fld"

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        t, d = config.training, config.distill
        distill.run_fld(
            fed,
            t.rounds,
            t.tau,
            t.lr,
            t.batch_size,
            alpha=d.alpha,
            temperature=d.temperature,
            seed_fraction=d.seed_fraction,
            server_epochs=d.server_epochs,
            server_lr=d.server_lr,
            warm_start=d.warm_start,
            seed_upload=d.seed_upload,
        )
        return ProcessOutput()


class MultFaugProcess(_Periodic):
    id = "multfaug"

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        t, f = config.training, config.faug
        outcome = faug.run_multfaug(
            fed,
            t.rounds,
            t.tau,
            t.lr,
            t.batch_size,
            hops=f.hops,
            compression=f.compression,
            d_min=f.d_min,
            seeds_per_label=f.seeds_per_label,
            pca_components=f.pca_components,
            augment=f.augment,
            lack_ratio=f.lack_ratio,
            weighting=t.weighting,
            payload=t.payload,
        )
        return ProcessOutput(privacy=outcome.report)


class BlockFlProcess(_Periodic):
    id = "blockfl"

    def run(self, fed: Federation, config: ExperimentConfig) -> ProcessOutput:
        t, b = config.training, config.blockfl
        outcome = blockfl.run_blockfl(
            fed,
            t.rounds,
            t.tau,
            t.lr,
            t.batch_size,
            b.num_miners,
            pow_rate=b.pow_rate,
            reward_total=b.reward_total,
            failed_miners=b.failed_miners,
        )
        return ProcessOutput(blocks=outcome.blocks)


PROCESSES: Dict[str, Type[Any]] = {
    cls.id: cls
    for cls in (
        FedAvgProcess,
        LocalProcess,
        AdaptiveProcess,
        GadmmProcess,
        FdProcess,
        FldProcess,
        MultFaugProcess,
        BlockFlProcess,
    )
}


def get_process(name: str) -> Process:
    try:
        return PROCESSES[name]()
    except KeyError:
        raise ConfigError(f"unknown protocol {name!r}", protocol=name) from None
