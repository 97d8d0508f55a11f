"""Data summarization: per-label statistics, PCA, coresets and CSR compression."""

import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.sparse import csr_matrix
from scipy.spatial.distance import pdist

from fogml.config import DEFAULT_WIRE_BYTES, POWER_ITER_MAX, POWER_ITER_TOL
from fogml.core.exceptions import (
    EmptyBatchError,
    InfeasibleRankError,
    InvalidArgumentError,
)
from fogml.core.models import CsrSample, Dataset, Sample
from fogml.core.rng import stream

logger = logging.getLogger(__name__)

ArrayOrSample = Union[np.ndarray, Sample]


class StatSummary(BaseModel):
    """Per-label statistics; row l of every matrix describes label l."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    counts: np.ndarray = Field(..., description="samples per label")
    mean: np.ndarray
    variance: np.ndarray = Field(..., description="population variance")
    sum: np.ndarray
    median: np.ndarray = Field(..., description="lower median for even counts")

    @property
    def labels(self) -> np.ndarray:
        """Labels with at least one sample."""
        return np.flatnonzero(self.counts > 0)


def stat_summary(dataset: Dataset) -> StatSummary:
    if len(dataset) == 0:
        raise EmptyBatchError("cannot summarize an empty dataset")
    L, d = dataset.num_labels, dataset.input_dim
    counts = dataset.label_counts()
    mean, var, total, median = (np.zeros((L, d)) for _ in range(4))
    for label in np.flatnonzero(counts):
        rows = dataset.features[dataset.labels == label]
        total[label] = rows.sum(axis=0)
        mean[label] = total[label] / rows.shape[0]
        var[label] = np.mean((rows - mean[label]) ** 2, axis=0)
        median[label] = np.sort(rows, axis=0)[(rows.shape[0] - 1) // 2]
    return StatSummary(counts=counts, mean=mean, variance=var, sum=total, median=median)


class PcaBasis(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mean: np.ndarray
    components: np.ndarray = Field(..., description="k x d, orthonormal rows")
    eigenvalues: np.ndarray = Field(..., description="descending, non-negative")

    @property
    def k(self) -> int:
        return int(self.components.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.components.shape[1])


def _top_eigenpair(
    matrix: np.ndarray, previous: Sequence[np.ndarray]
) -> Tuple[float, np.ndarray]:
    d = matrix.shape[0]

    def _orthogonalize(v: np.ndarray) -> np.ndarray:
        for u in previous:
            v = v - (u @ v) * u
        return v

    # a dense random start has a nonzero share of every eigenvector
    rng = stream(0, "pca", d, len(previous))
    v = _orthogonalize(rng.standard_normal(d))
    v /= np.linalg.norm(v)
    for _ in range(POWER_ITER_MAX):
        w = _orthogonalize(matrix @ v)
        norm = np.linalg.norm(w)
        if norm < POWER_ITER_TOL:
            break
        w /= norm
        if np.linalg.norm(w - v) < POWER_ITER_TOL:
            v = w
            break
        v = w
    else:
        logger.debug("power iteration hit %d iterations", POWER_ITER_MAX)
    return max(float(v @ matrix @ v), 0.0), v


def pca_fit(dataset: Union[Dataset, np.ndarray], k: int) -> PcaBasis:
    """Top-k principal components by power iteration with deflation.

    The covariance uses the population (1/n) normalisation.
    """
    if isinstance(dataset, Dataset):
        features = dataset.features
    else:
        features = np.asarray(dataset, dtype=np.float64)
    n, d = features.shape
    if k < 1 or k > min(n - 1, d):
        raise InfeasibleRankError(
            "number of components must lie in [1, min(n - 1, d)]", k=k, n=n, d=d
        )
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / n

    components, eigenvalues = [], []
    work = cov.copy()
    for _ in range(k):
        value, vector = _top_eigenpair(work, components)
        components.append(vector)
        eigenvalues.append(value)
        work = work - value * np.outer(vector, vector)

    order = np.argsort(-np.asarray(eigenvalues), kind="stable")
    return PcaBasis(
        mean=mean,
        components=np.asarray(components)[order],
        eigenvalues=np.asarray(eigenvalues)[order],
    )


def _features(x: ArrayOrSample) -> np.ndarray:
    return x.features if isinstance(x, Sample) else np.asarray(x, dtype=np.float64)


def pca_project(basis: PcaBasis, sample: ArrayOrSample) -> np.ndarray:
    """Mean-centred projection; accepts one sample or an n x d matrix."""
    return (_features(sample) - basis.mean) @ basis.components.T


def pca_reconstruct(basis: PcaBasis, z: np.ndarray) -> np.ndarray:
    return np.asarray(z) @ basis.components + basis.mean


class Coreset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: Dataset
    weights: np.ndarray
    indices: np.ndarray = Field(..., description="rows of the source dataset")

    @field_validator("weights", mode="before")
    def _coerce(cls, v):
        return np.asarray(v, dtype=np.float64).reshape(-1)

    @model_validator(mode="after")
    def _check(self) -> "Coreset":
        if self.weights.shape[0] != len(self.samples):
            raise ValueError("one weight per coreset sample is required")
        if np.any(self.weights <= 0):
            raise ValueError("coreset weights must be positive")
        return self

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())


def coreset_lightweight(dataset: Dataset, m: int, seed: int) -> Coreset:
    """Importance-sample ``m`` points with q = 1/(2n) + dist^2 / (2 sum dist^2)."""
    n = len(dataset)
    if m < 1 or m > n:
        raise InvalidArgumentError("coreset size must lie in [1, n]", m=m, n=n)
    mu = dataset.features.mean(axis=0)
    dist2 = np.sum((dataset.features - mu) ** 2, axis=1)
    total = dist2.sum()
    if total > 0:
        q = 0.5 / n + 0.5 * dist2 / total
    else:
        q = np.full(n, 1.0 / n)
    rng = stream(seed, "coreset")
    idx = rng.choice(n, size=m, replace=True, p=q)
    return Coreset(samples=dataset.subset(idx), weights=1.0 / (m * q[idx]), indices=idx)


def weighted_kmeans_cost(
    points: np.ndarray, centers: np.ndarray, weights: Optional[np.ndarray] = None
) -> float:
    """sum_i w_i * min_c ||x_i - c||^2."""
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2).min(axis=1)
    if weights is None:
        return float(d2.sum())
    return float(np.dot(weights, d2))


def kmeans_centers(
    points: np.ndarray, k: int, weights: Optional[np.ndarray] = None, seed: int = 0
) -> np.ndarray:
    from sklearn.cluster import KMeans

    model = KMeans(n_clusters=k, n_init=10, random_state=seed)
    model.fit(points, sample_weight=weights)
    return model.cluster_centers_


def encode_csr(features: np.ndarray, shape: Tuple[int, int], label: int) -> CsrSample:
    """CSR form of a dense feature vector laid out as ``shape``."""
    encoded = csr_matrix(np.asarray(features, dtype=np.float64).reshape(shape))
    encoded.sort_indices()
    return CsrSample(
        values=encoded.data,
        col_idx=encoded.indices,
        row_ptr=encoded.indptr,
        shape=shape,
        label=label,
    )


def compress_sample(
    sample: Sample,
    drop_fraction: float,
    seed: int,
    shape: Optional[Tuple[int, int]] = None,
    index: Sequence[int] = (),
) -> CsrSample:
    """Zero floor(c * d) random coordinates and CSR-encode the rest.

    ``index`` extends the "compress" stream key so every (device, sample)
    pair gets its own mask.
    """
    if not 0.0 <= drop_fraction < 1.0:
        raise InvalidArgumentError(
            "drop fraction must lie in [0, 1)", drop_fraction=drop_fraction
        )
    x = sample.features
    d = x.shape[0]
    shape = shape or (1, d)
    if shape[0] * shape[1] != d:
        raise InvalidArgumentError(
            "shape does not match feature length", shape=shape, d=d
        )
    rng = stream(seed, "compress", *index)
    dropped = rng.choice(d, size=int(np.floor(drop_fraction * d)), replace=False)
    masked = x.copy()
    masked[dropped] = 0.0
    return encode_csr(masked, shape, sample.label)


def decode_csr(csr: CsrSample) -> Sample:
    dense = csr_matrix((csr.values, csr.col_idx, csr.row_ptr), shape=csr.shape)
    return Sample(features=dense.toarray().reshape(-1), label=csr.label)


def dense_payload_bytes(input_dim: int, wire_bytes: int = DEFAULT_WIRE_BYTES) -> int:
    return input_dim * wire_bytes


def mean_pairwise_distance(features: np.ndarray) -> float:
    """Mean Euclidean distance over all sample pairs (0 for fewer than two)."""
    if features.shape[0] < 2:
        return 0.0
    return float(pdist(features).mean())
