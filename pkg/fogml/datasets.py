"""Data ingestion (IDX files, synthetic blobs) and non-IID partitioning."""

import gzip
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from fogml.core.exceptions import (
    BadMagicError,
    CountMismatchError,
    InvalidArgumentError,
    InfeasiblePartitionError,
    TruncatedFileError,
)
from fogml.core.models import Dataset, LocalDataset, PartitionPlan
from fogml.core.rng import stream

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
MNIST_LABELS = 10

PathLike = Union[str, Path]


def _read_bytes(path: PathLike) -> bytes:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _header(path: str, raw: bytes, magic: int, dims: int) -> Tuple[int, ...]:
    # Data format (big endian):
    # i32 | magic
    # i32 | item count (then rows, cols for images)
    # u8[] | payload, row-major
    need = 4 * (1 + dims)
    if len(raw) < need:
        raise TruncatedFileError(path, need, len(raw))
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(path, magic, found)
    return struct.unpack(f">{dims}I", raw[4:need])


def _load_images(path: PathLike) -> Tuple[np.ndarray, Tuple[int, int]]:
    raw = _read_bytes(path)
    count, rows, cols = _header(str(path), raw, IDX_IMAGES_MAGIC, 3)
    expected = 16 + count * rows * cols
    if len(raw) < expected:
        raise TruncatedFileError(str(path), expected, len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(np.float64) / 255.0, (rows, cols)


def _load_labels(path: PathLike) -> np.ndarray:
    raw = _read_bytes(path)
    (count,) = _header(str(path), raw, IDX_LABELS_MAGIC, 1)
    if len(raw) < 8 + count:
        raise TruncatedFileError(str(path), 8 + count, len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_idx(
    images_path: PathLike, labels_path: PathLike, num_labels: int = MNIST_LABELS
) -> Dataset:
    """Load an IDX image/label pair; pixels are scaled by 1/255."""
    features, shape = _load_images(images_path)
    labels = _load_labels(labels_path)
    if features.shape[0] != labels.shape[0]:
        raise CountMismatchError(features.shape[0], labels.shape[0])
    logger.info(
        "loaded %d samples of shape %s from %s", len(labels), shape, images_path
    )
    return Dataset(
        features=features,
        labels=labels,
        num_labels=max(num_labels, int(labels.max(initial=0)) + 1),
        image_shape=shape,
        bounded=True,
    )


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike) -> None:
    """Write a dataset back to IDX (pixels rounded to bytes)."""
    rows, cols = dataset.layout
    n = len(dataset)
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def blob_centers(
    num_labels: int, input_dim: int, separation: float = 4.0
) -> np.ndarray:
    """Axis-aligned centers, pairwise at least ``separation`` apart."""
    centers = np.zeros((num_labels, input_dim))
    for label in range(num_labels):
        axis, ring = label % input_dim, label // input_dim
        centers[label, axis] = separation * (ring + 1.0 / np.sqrt(2.0))
    return centers


def gen_blobs(
    num_labels: int,
    input_dim: int,
    n_per_label: int,
    spread: float,
    seed: int,
    separation: float = 4.0,
) -> Dataset:
    """Gaussian blobs, one per label, with standard deviation ``spread``."""
    if num_labels < 2:
        raise InvalidArgumentError("blobs need at least two labels", L=num_labels)
    rng = stream(seed, "blobs")
    centers = blob_centers(num_labels, input_dim, separation)
    labels = np.repeat(np.arange(num_labels), n_per_label)
    noise = rng.standard_normal((labels.shape[0], input_dim))
    features = centers[labels] + spread * noise
    return Dataset(features=features, labels=labels, num_labels=num_labels)


def partition(samples: Dataset, plan: PartitionPlan) -> List[LocalDataset]:
    """Give device d exactly ``plan.per_label_counts[d][l]`` samples of label l.

    Samples are drawn without replacement from each label's pool, shuffled with
    ``plan.shuffle_seed``; no sample reaches two devices.
    """
    if plan.num_labels != samples.num_labels:
        raise InvalidArgumentError(
            "plan and dataset disagree on the number of labels",
            plan=plan.num_labels,
            dataset=samples.num_labels,
        )
    available = samples.label_counts()
    requested = plan.totals()
    deficient: Dict[int, Dict[str, int]] = {
        label: {"requested": int(requested[label]), "available": int(available[label])}
        for label in range(plan.num_labels)
        if requested[label] > available[label]
    }
    if deficient:
        raise InfeasiblePartitionError(deficient)

    rng = stream(plan.shuffle_seed, "partition")
    pools = [
        rng.permutation(np.flatnonzero(samples.labels == label))
        for label in range(plan.num_labels)
    ]
    cursor = np.zeros(plan.num_labels, dtype=np.int64)
    devices: List[LocalDataset] = []
    for device_id, row in enumerate(plan.per_label_counts):
        idx: List[np.ndarray] = []
        for label, count in enumerate(row):
            idx.append(pools[label][cursor[label] : cursor[label] + count])
            cursor[label] += count
        chosen = np.concatenate(idx) if idx else np.zeros(0, dtype=np.int64)
        devices.append(
            LocalDataset(
                device_id=device_id,
                features=samples.features[chosen],
                labels=samples.labels[chosen],
                num_labels=samples.num_labels,
                image_shape=samples.image_shape,
                bounded=samples.bounded,
            )
        )
    logger.debug(
        "partitioned %d samples over %d devices", int(cursor.sum()), plan.num_devices
    )
    return devices


def train_test_split(
    samples: Dataset, test_per_label: int, seed: int
) -> Tuple[Dataset, Dataset]:
    """Hold out ``test_per_label`` samples of every label (fewer if scarce)."""
    rng = stream(seed, "split")
    test_idx: List[np.ndarray] = []
    for label in range(samples.num_labels):
        pool = rng.permutation(np.flatnonzero(samples.labels == label))
        test_idx.append(pool[:test_per_label])
    test = np.sort(np.concatenate(test_idx))
    mask = np.ones(len(samples), dtype=bool)
    mask[test] = False
    return samples.subset(np.flatnonzero(mask)), samples.subset(test)


def split_validation(
    local: LocalDataset, rng: np.random.Generator, fraction: float = 0.2
) -> Tuple[LocalDataset, LocalDataset]:
    """Per-device train/validation split drawn from the device stream."""
    order = rng.permutation(len(local))
    cut = len(local) - int(round(fraction * len(local)))
    train, val = local.subset(order[:cut]), local.subset(order[cut:])
    return train, val  # type: ignore[return-value]
