"""Pydantic models for the data exchanged between simulated devices."""

from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from fogml.config import (
    CSR_COL_IDX_BYTES,
    CSR_ROW_PTR_BYTES,
    CSR_VALUE_BYTES,
    ModelKind,
)
from fogml.core.exceptions import InvalidArgumentError


def _as_float_array(value, ndim: int) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if ndim == 1:
        return arr.reshape(-1)
    if arr.size == 0:
        return arr.reshape(0, arr.shape[-1] if arr.ndim == 2 else 0)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    return arr


def _as_label_array(value) -> np.ndarray:
    return np.array(value, dtype=np.int64).reshape(-1)


class ModelSpec(BaseModel):
    """Shape of an on-device model: multinomial LR or a one-hidden-layer MLP."""

    model_config = ConfigDict(frozen=True)

    kind: ModelKind = Field(..., description="LR or MLP1")
    input_dim: int = Field(..., ge=1, description="Feature width")
    hidden_dim: int = Field(0, ge=0, description="Hidden units (0 for LR)")
    num_labels: int = Field(..., ge=2, description="Number of labels L")
    activation: Literal["relu"] = "relu"

    @model_validator(mode="after")
    def _check_hidden(self) -> "ModelSpec":
        if self.kind == "MLP1" and self.hidden_dim < 1:
            raise ValueError("MLP1 requires hidden_dim >= 1")
        if self.kind == "LR" and self.hidden_dim != 0:
            raise ValueError("LR requires hidden_dim == 0")
        return self

    @property
    def shapes(self) -> List[Tuple[int, ...]]:
        """Shapes of the packed tensors, in storage order."""
        d, h, L = self.input_dim, self.hidden_dim, self.num_labels
        if self.kind == "LR":
            return [(L, d), (L,)]
        return [(h, d), (h,), (L, h), (L,)]

    @property
    def num_params(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.shapes))


class ParamVector(BaseModel):
    """Flat float64 model parameters; the unit of FL exchange."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="Packed parameters")
    spec: ModelSpec

    @field_validator("values", mode="before")
    def _coerce(cls, v):
        return _as_float_array(v, 1)

    @model_validator(mode="after")
    def _check(self) -> "ParamVector":
        if self.values.shape[0] != self.spec.num_params:
            raise ValueError(
                f"expected {self.spec.num_params} values for {self.spec.kind}, "
                f"got {self.values.shape[0]}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameters must be finite")
        return self

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        return cls(values=np.zeros(spec.num_params), spec=spec)

    @property
    def size(self) -> int:
        return int(self.values.shape[0])

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values=values, spec=self.spec)


def unpack_values(values: np.ndarray, spec: ModelSpec) -> List[np.ndarray]:
    out: List[np.ndarray] = []
    offset = 0
    for shape in spec.shapes:
        size = int(np.prod(shape))
        out.append(values[offset : offset + size].reshape(shape))
        offset += size
    return out


class Sample(BaseModel):
    """Single labelled sample."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    label: int = Field(..., ge=0)

    @field_validator("features", mode="before")
    def _coerce(cls, v):
        return _as_float_array(v, 1)


class Batch(BaseModel):
    """Non-empty labelled feature matrix."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray = Field(..., description="n x input_dim")
    labels: np.ndarray = Field(..., description="label indices")

    @field_validator("features", mode="before")
    def _coerce_features(cls, v):
        return _as_float_array(v, 2)

    @field_validator("labels", mode="before")
    def _coerce_labels(cls, v):
        return _as_label_array(v)

    @model_validator(mode="after")
    def _check(self) -> "Batch":
        n = self.features.shape[0]
        if n < 1:
            raise ValueError("batch must hold at least one sample")
        if self.labels.shape[0] != n:
            raise ValueError(f"{n} feature rows but {self.labels.shape[0]} labels")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        return self

    def __len__(self) -> int:
        return int(self.features.shape[0])


class Dataset(BaseModel):
    """A labelled sample collection stored column-wise (features matrix + labels)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    features: np.ndarray
    labels: np.ndarray
    num_labels: int = Field(..., ge=2)
    image_shape: Optional[Tuple[int, int]] = Field(
        None, description="(rows, cols) layout of each feature vector"
    )
    bounded: bool = Field(False, description="Features live in [0, 1] (pixels)")

    @field_validator("features", mode="before")
    def _coerce_features(cls, v):
        return _as_float_array(v, 2)

    @field_validator("labels", mode="before")
    def _coerce_labels(cls, v):
        return _as_label_array(v)

    @model_validator(mode="after")
    def _check(self) -> "Dataset":
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels must have equal length")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_labels
        ):
            raise ValueError("labels out of range")
        return self

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __getitem__(self, idx: int) -> Sample:
        return Sample(features=self.features[idx], label=int(self.labels[idx]))

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def layout(self) -> Tuple[int, int]:
        """(rows, cols) used for CSR encoding; a single row when not an image."""
        return self.image_shape or (1, self.input_dim)

    def label_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_labels)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return self.model_copy(
            update={"features": self.features[idx], "labels": self.labels[idx]}
        )

    def concat(self, other: "Dataset") -> "Dataset":
        return self.model_copy(
            update={
                "features": np.vstack([self.features, other.features]),
                "labels": np.concatenate([self.labels, other.labels]),
            }
        )

    def as_batch(self) -> Batch:
        return Batch(features=self.features, labels=self.labels)


class LocalDataset(Dataset):
    """Dataset held by one device."""

    device_id: int = Field(..., ge=0)


class PartitionPlan(BaseModel):
    """Explicit per-device, per-label sample counts."""

    num_devices: int = Field(..., ge=1)
    per_label_counts: List[List[int]] = Field(..., description="device x label")
    shuffle_seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "PartitionPlan":
        if len(self.per_label_counts) != self.num_devices:
            raise ValueError("one row of counts per device is required")
        widths = {len(row) for row in self.per_label_counts}
        if len(widths) != 1:
            raise ValueError("every device row must cover the same labels")
        if any(c < 0 for row in self.per_label_counts for c in row):
            raise ValueError("counts must be non-negative")
        return self

    @property
    def num_labels(self) -> int:
        return len(self.per_label_counts[0])

    def totals(self) -> np.ndarray:
        """Requested samples per label across devices."""
        return np.asarray(self.per_label_counts, dtype=np.int64).sum(axis=0)

    @classmethod
    def iid(
        cls, num_devices: int, num_labels: int, per_label: int, shuffle_seed: int = 0
    ) -> "PartitionPlan":
        return cls(
            num_devices=num_devices,
            per_label_counts=[[per_label] * num_labels for _ in range(num_devices)],
            shuffle_seed=shuffle_seed,
        )

    @classmethod
    def from_counts(
        cls, counts: Sequence[Sequence[int]], shuffle_seed: int = 0
    ) -> "PartitionPlan":
        rows = [[int(c) for c in row] for row in counts]
        return cls(
            num_devices=len(rows), per_label_counts=rows, shuffle_seed=shuffle_seed
        )

    @classmethod
    def target_label(
        cls,
        num_devices: int,
        num_labels: int,
        target_count: int = 4,
        other_count: int = 200,
        shuffle_seed: int = 0,
        target: Optional[int] = None,
    ) -> "PartitionPlan":
        """Device d holds few samples of one label and many of every other label.

        The scarce label is d mod L, or ``target`` on every device when given.
        """
        if target is not None and not 0 <= target < num_labels:
            raise InvalidArgumentError(
                "target label outside the label range",
                target=target,
                num_labels=num_labels,
            )
        rows = []
        for d in range(num_devices):
            row = [other_count] * num_labels
            row[d % num_labels if target is None else target] = target_count
            rows.append(row)
        return cls(
            num_devices=num_devices, per_label_counts=rows, shuffle_seed=shuffle_seed
        )


class LogitTable(BaseModel):
    """Per-ground-truth-label average logits; the unit of FD/FLD exchange."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    rows: np.ndarray = Field(..., description="L x L; row l averages label-l logits")
    counts: np.ndarray = Field(..., description="samples accumulated per row")

    @field_validator("rows", mode="before")
    def _coerce_rows(cls, v):
        return _as_float_array(v, 2)

    @field_validator("counts", mode="before")
    def _coerce_counts(cls, v):
        return np.array(v, dtype=np.float64).reshape(-1)

    @model_validator(mode="after")
    def _check(self) -> "LogitTable":
        L = self.counts.shape[0]
        if self.rows.shape != (L, L):
            raise ValueError(f"rows must be {L}x{L}, got {self.rows.shape}")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("logit rows must be finite")
        return self

    @classmethod
    def empty(cls, num_labels: int) -> "LogitTable":
        return cls(
            rows=np.zeros((num_labels, num_labels)), counts=np.zeros(num_labels)
        )

    @property
    def num_labels(self) -> int:
        return int(self.counts.shape[0])

    @property
    def present(self) -> np.ndarray:
        """Boolean mask of rows holding at least one accumulated logit."""
        return self.counts > 0

    def any_present(self) -> bool:
        return bool(self.present.any())


class SdiVector(BaseModel):
    """Sample distribution information: bit l marks a label the device lacks."""

    model_config = ConfigDict(frozen=True)

    bits: Tuple[int, ...]
    kind: Literal["private", "public", "aggregated"] = "private"

    @field_validator("bits", mode="before")
    def _coerce(cls, v):
        return tuple(int(b) for b in v)

    @model_validator(mode="after")
    def _check(self) -> "SdiVector":
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("SDI bits must be 0 or 1")
        return self

    @classmethod
    def zeros(cls, length: int, kind: str = "public") -> "SdiVector":
        return cls(bits=(0,) * length, kind=kind)

    @classmethod
    def from_labels(
        cls, length: int, labels: Sequence[int], kind: str = "private"
    ) -> "SdiVector":
        bits = [0] * length
        for label in labels:
            bits[label] = 1
        return cls(bits=bits, kind=kind)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def ones(self) -> int:
        return sum(self.bits)

    @property
    def indices(self) -> List[int]:
        return [i for i, b in enumerate(self.bits) if b]

    def union(self, other: "SdiVector", kind: Optional[str] = None) -> "SdiVector":
        return SdiVector(
            bits=[a | b for a, b in zip(self.bits, other.bits)],
            kind=kind or self.kind,
        )

    def issubset(self, other: "SdiVector") -> bool:
        return all(b <= o for b, o in zip(self.bits, other.bits))


class CsrSample(BaseModel):
    """A masked sample encoded in compressed sparse row form."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    col_idx: np.ndarray
    row_ptr: np.ndarray
    shape: Tuple[int, int]
    label: int = Field(..., ge=0)

    @field_validator("values", mode="before")
    def _coerce_values(cls, v):
        return np.array(v, dtype=np.float64).reshape(-1)

    @field_validator("col_idx", "row_ptr", mode="before")
    def _coerce_index(cls, v):
        return np.array(v, dtype=np.int64).reshape(-1)

    @model_validator(mode="after")
    def _check(self) -> "CsrSample":
        rows, _ = self.shape
        if self.row_ptr.shape[0] != rows + 1:
            raise ValueError("row_ptr must have rows + 1 entries")
        if np.any(np.diff(self.row_ptr) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if self.row_ptr[-1] != self.values.shape[0]:
            raise ValueError("last row_ptr entry must equal the number of values")
        if self.col_idx.shape[0] != self.values.shape[0]:
            raise ValueError("col_idx and values must align")
        for r in range(rows):
            cols = self.col_idx[self.row_ptr[r] : self.row_ptr[r + 1]]
            if np.any(np.diff(cols) <= 0):
                raise ValueError("col_idx must be strictly increasing within a row")
        return self

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def payload_bytes(self) -> int:
        rows, _ = self.shape
        return (
            self.nnz * (CSR_VALUE_BYTES + CSR_COL_IDX_BYTES)
            + (rows + 1) * CSR_ROW_PTR_BYTES
        )


class QuantizedParams(BaseModel):
    """Uniformly quantized parameter vector (codes + scale/offset)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    codes: np.ndarray
    bits: int = Field(..., ge=1, le=32)
    scale: float
    offset: float
    spec: ModelSpec


class SparseParams(BaseModel):
    """Top-k coordinates of a parameter vector."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    indices: np.ndarray
    values: np.ndarray
    spec: ModelSpec

    def densify(self) -> np.ndarray:
        out = np.zeros(self.spec.num_params)
        out[self.indices] = self.values
        return out


class SeedBatch(BaseModel):
    """Raw seed samples uploaded for server-side distillation."""

    samples: Dataset
    fraction: float = Field(..., gt=0.0, le=1.0)

    def __len__(self) -> int:
        return len(self.samples)
