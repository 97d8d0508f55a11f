"""Experiment configuration: a strict pydantic tree loaded from JSON."""

import hashlib
import json
import math
from pathlib import Path
from typing import Any, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from typing_extensions import Annotated

from fogml.config import (
    DEFAULT_ALPHA,
    DEFAULT_COMPRESSION,
    DEFAULT_D_MIN,
    DEFAULT_INNER_STEPS,
    DEFAULT_RHO,
    DEFAULT_SEED_FRACTION,
    DEFAULT_SEEDS_PER_LABEL,
    DEFAULT_SERVER_EPOCHS,
    DEFAULT_TAU_MAX,
    DEFAULT_TEMPERATURE,
    DEFAULT_WIRE_BYTES,
    ModelKind,
    ProtocolName,
    Weighting,
)
from fogml.core.exceptions import ConfigError
from fogml.core.models import ModelSpec, PartitionPlan
from fogml.netsim import CostBudget, LinkSpec
from fogml.protocols.faug import DEFAULT_LACK_RATIO
from fogml.protocols.fedavg import PayloadMode


class Section(BaseModel):
    """Base for every config section: unknown keys are errors."""

    model_config = ConfigDict(extra="forbid")


class BlobsDataset(Section):
    kind: Literal["blobs"] = "blobs"
    num_labels: int = Field(10, ge=2)
    input_dim: int = Field(20, ge=1)
    n_per_label: int = Field(
        300, ge=1, description="pool size per label before the test split"
    )
    spread: float = Field(1.0, gt=0)
    separation: float = Field(4.0, gt=0)
    test_per_label: int = Field(50, ge=1)


class IdxDataset(Section):
    """MNIST-style IDX files; the test set is held out of the training pool
    unless separate test files are given."""

    kind: Literal["idx"] = "idx"
    images: str
    labels: str
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    num_labels: int = Field(10, ge=2)
    test_per_label: int = Field(100, ge=1)
    limit_per_label: Optional[int] = Field(
        None, ge=1, description="subsample the training pool"
    )

    @model_validator(mode="after")
    def _check_test_pair(self) -> "IdxDataset":
        if (self.test_images is None) != (self.test_labels is None):
            raise ValueError("test_images and test_labels go together")
        return self


DatasetConfig = Annotated[Union[BlobsDataset, IdxDataset], Field(discriminator="kind")]


class PartitionConfig(Section):
    kind: Literal["iid", "target_label", "explicit"] = "iid"
    num_devices: int = Field(10, ge=1)
    per_label: int = Field(
        20, ge=0, description="iid: samples of every label per device"
    )
    target_count: int = Field(4, ge=0)
    other_count: int = Field(200, ge=0)
    target: Optional[int] = Field(
        None, ge=0, description="target_label: the scarce label on every device"
    )
    counts: Optional[List[List[int]]] = Field(
        None, description="explicit: device x label"
    )
    shuffle_seed: Optional[int] = Field(None, description="defaults to the master seed")

    @model_validator(mode="after")
    def _check_counts(self) -> "PartitionConfig":
        if self.kind == "explicit":
            if not self.counts:
                raise ValueError("an explicit partition needs counts")
            if len(self.counts) != self.num_devices:
                raise ValueError("explicit counts need one row per device")
        return self

    def plan(self, num_labels: int, master_seed: int) -> PartitionPlan:
        seed = master_seed if self.shuffle_seed is None else self.shuffle_seed
        if self.kind == "iid":
            return PartitionPlan.iid(self.num_devices, num_labels, self.per_label, seed)
        if self.kind == "target_label":
            return PartitionPlan.target_label(
                self.num_devices,
                num_labels,
                self.target_count,
                self.other_count,
                seed,
                target=self.target,
            )
        return PartitionPlan.from_counts(self.counts or [], seed)


class ModelConfig(Section):
    kind: ModelKind = "LR"
    hidden_dim: int = Field(0, ge=0)

    def spec(self, input_dim: int, num_labels: int) -> ModelSpec:
        return ModelSpec(
            kind=self.kind,
            input_dim=input_dim,
            hidden_dim=self.hidden_dim,
            num_labels=num_labels,
        )


class TrainingConfig(Section):
    rounds: int = Field(30, ge=0)
    tau: int = Field(
        5, ge=1, description="local iterations per round (FD/FLD interval)"
    )
    lr: float = Field(0.1, gt=0)
    batch_size: int = Field(32, ge=1)
    weighting: Weighting = "data"
    payload: PayloadMode = Field(default_factory=PayloadMode)


class AdaptiveConfig(Section):
    tau_max: int = Field(DEFAULT_TAU_MAX, ge=1)
    initial_tau: int = Field(1, ge=1)
    max_rounds: Optional[int] = Field(None, ge=1)


class BudgetConfig(Section):
    c_comp: float = Field(..., gt=0)
    c_comm: float = Field(..., gt=0)
    total: float = Field(..., gt=0)

    def cost_budget(self) -> CostBudget:
        return CostBudget(c_comp=self.c_comp, c_comm=self.c_comm, total=self.total)


class LinkConfig(Section):
    uplink_bits_per_round: float = Field(1e6, gt=0)
    downlink_bits_per_round: float = Field(1e7, gt=0)

    def link_spec(self) -> LinkSpec:
        return LinkSpec(
            uplink_bits_per_round=self.uplink_bits_per_round,
            downlink_bits_per_round=self.downlink_bits_per_round,
        )


class GadmmConfig(Section):
    rho: float = Field(DEFAULT_RHO, gt=0)
    max_rounds: int = Field(500, ge=1)
    tol: float = Field(1e-6, gt=0)
    inner_steps: int = Field(DEFAULT_INNER_STEPS, ge=1)


class DistillConfig(Section):
    alpha: float = Field(DEFAULT_ALPHA, ge=0)
    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0)
    seed_fraction: float = Field(DEFAULT_SEED_FRACTION, gt=0, le=1)
    server_epochs: int = Field(DEFAULT_SERVER_EPOCHS, ge=1)
    server_lr: Optional[float] = Field(None, gt=0)
    warm_start: bool = True
    seed_upload: Literal["every_round", "once"] = "every_round"


class FaugConfig(Section):
    hops: int = Field(1, ge=1)
    compression: float = Field(DEFAULT_COMPRESSION, ge=0, lt=1)
    d_min: int = Field(DEFAULT_D_MIN, ge=0)
    seeds_per_label: int = Field(DEFAULT_SEEDS_PER_LABEL, ge=1)
    pca_components: int = Field(16, ge=1)
    augment: bool = True
    lack_ratio: float = Field(DEFAULT_LACK_RATIO, gt=0, le=1)


class BlockFlConfig(Section):
    num_miners: int = Field(3, ge=1)
    pow_rate: float = Field(1.0, gt=0)
    reward_total: float = Field(1.0, gt=0)
    failed_miners: List[int] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_miners(self) -> "BlockFlConfig":
        down = set(self.failed_miners) & set(range(self.num_miners))
        if len(down) >= self.num_miners:
            raise ValueError("at least one miner must stay up")
        return self


class ExperimentConfig(Section):
    """One simulation run.

    Example::

        {"protocol": "fedavg",
         "dataset": {"kind": "blobs", "num_labels": 4, "input_dim": 8},
         "partition": {"kind": "iid", "num_devices": 10, "per_label": 20},
         "training": {"rounds": 30, "tau": 5, "lr": 0.1},
         "master_seed": 7}
    """

    protocol: ProtocolName
    dataset: DatasetConfig = Field(default_factory=BlobsDataset)
    partition: PartitionConfig = Field(default_factory=PartitionConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    adaptive: AdaptiveConfig = Field(default_factory=AdaptiveConfig)
    budget: Optional[BudgetConfig] = None
    link: LinkConfig = Field(default_factory=LinkConfig)
    wire_bytes: int = Field(DEFAULT_WIRE_BYTES, ge=1, le=8)
    gadmm: GadmmConfig = Field(default_factory=GadmmConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    faug: FaugConfig = Field(default_factory=FaugConfig)
    blockfl: BlockFlConfig = Field(default_factory=BlockFlConfig)
    master_seed: int = Field(0, ge=0)
    output_dir: str = "runs"
    progress: bool = False

    @classmethod
    def from_dict(cls, data: Any) -> "ExperimentConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as exc:
            raise ConfigError(
                "invalid experiment config",
                errors=[
                    {"loc": ".".join(str(p) for p in e["loc"]), "msg": e["msg"]}
                    for e in exc.errors()
                ],
            ) from exc

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}", path=str(path)) from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config {path} is not valid JSON", path=str(path), line=exc.lineno
            ) from exc
        return cls.from_dict(data)

    def with_override(self, dotted_key: str, value: Any) -> "ExperimentConfig":
        """Copy with one scalar field replaced, e.g. ``training.tau``."""
        data = self.model_dump()
        *parents, leaf = dotted_key.split(".")
        node = data
        for part in parents:
            if not isinstance(node, dict) or not isinstance(node.get(part), dict):
                raise ConfigError(
                    f"{dotted_key} does not address a config field", key=dotted_key
                )
            node = node[part]
        if leaf not in node or isinstance(node[leaf], (dict, list)):
            raise ConfigError(
                f"{dotted_key} is not a scalar config field", key=dotted_key
            )
        node[leaf] = value
        return self.from_dict(data)

    def canonical_json(self) -> str:
        """Key-sorted JSON; output_dir and progress do not change results."""
        data = self.model_dump(mode="json", exclude={"output_dir", "progress"})
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    def cache_key(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def cost_budget(self) -> Optional[CostBudget]:
        return self.budget.cost_budget() if self.budget is not None else None

    @property
    def unlimited(self) -> bool:
        return self.budget is None or math.isinf(self.budget.total)
