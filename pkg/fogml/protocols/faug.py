"""Multi-hop federated data augmentation with sample compression (MultFAug).

A device's private SDI marks the labels it lacks. Devices on a hop chain
forward a cumulative public SDI towards the server; a device whose private SDI
is already covered by what it inherited hides behind it, otherwise it adds its
lacking labels plus ``d_min`` dummy labels. Each newly indicated label carries
compressed seed samples (noise for dummies). The server, which knows which
payloads are dummies, fits a generative augmenter on the real seeds and sends
it back so devices can synthesize samples of the labels they lack.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fogml.config import (
    AUGMENTER_SHRINKAGE,
    DEFAULT_COMPRESSION,
    DEFAULT_D_MIN,
    DEFAULT_SEEDS_PER_LABEL,
    SERVER,
    Weighting,
)
from fogml.core.exceptions import (
    InvalidArgumentError,
    NoFittableLabelError,
    UnfittedLabelError,
)
from fogml.core.models import (
    CsrSample,
    Dataset,
    LocalDataset,
    ParamVector,
    SdiVector,
)
from fogml.core.rng import stream
from fogml.netsim import Topology, device_node
from fogml.protocols.fedavg import PayloadMode, run_fedavg
from fogml.protocols.federation import Federation
from fogml.summarize import (
    PcaBasis,
    compress_sample,
    decode_csr,
    encode_csr,
    pca_fit,
    pca_project,
    pca_reconstruct,
)

logger = logging.getLogger(__name__)

# Label share below which a device counts a label as lacking
DEFAULT_LACK_RATIO = 0.1


class PublicSdi(BaseModel):
    public: SdiVector
    new_indicators: List[int]
    dummies: List[int]
    short: bool = Field(False, description="fewer dummies available than requested")


def make_public_sdi(
    private: SdiVector, inherited: SdiVector, d_min: int, rng: np.random.Generator
) -> PublicSdi:
    """public = inherited OR private OR dummies.

    When the private SDI exposes a label the inherited SDI does not cover,
    exactly ``d_min`` dummies are drawn from the labels absent in
    inherited OR private (all of them, flagged short, when fewer remain).
    """
    if len(private) != len(inherited):
        raise InvalidArgumentError(
            "SDI lengths differ", private=len(private), inherited=len(inherited)
        )
    covered = inherited.union(private)
    if private.issubset(inherited):
        return PublicSdi(
            public=SdiVector(bits=covered.bits, kind="public"),
            new_indicators=[],
            dummies=[],
        )
    absent = [i for i, b in enumerate(covered.bits) if not b]
    short = len(absent) < d_min
    if short:
        logger.warning(
            "only %d dummy labels available, %d requested", len(absent), d_min
        )
    dummies: List[int] = []
    if absent:
        picked = rng.choice(absent, size=min(d_min, len(absent)), replace=False)
        dummies = sorted(int(i) for i in picked)
    bits = list(covered.bits)
    for label in dummies:
        bits[label] = 1
    public = SdiVector(bits=bits, kind="public")
    new = [i for i in public.indices if not inherited.bits[i]]
    return PublicSdi(public=public, new_indicators=new, dummies=dummies, short=short)


def privacy(private: SdiVector, transmitted: SdiVector) -> float:
    """1 - ones(private) / ones(transmitted); 1 when nothing private is exposed."""
    if private.ones == 0:
        return 1.0
    return 1.0 - private.ones / transmitted.ones


class HopChain(BaseModel):
    """Devices in forwarding order; the last one hands over to the server."""

    devices: List[int]

    @model_validator(mode="after")
    def _check(self) -> "HopChain":
        if not self.devices:
            raise ValueError("a hop chain needs at least one device")
        if len(set(self.devices)) != len(self.devices):
            raise ValueError("a hop chain may not revisit a device")
        return self

    @property
    def path(self) -> List[str]:
        return [device_node(d) for d in self.devices] + [SERVER]

    @property
    def hops(self) -> int:
        return len(self.devices)


class SeedPayload(BaseModel):
    """Compressed seed travelling up a chain; ``dummy`` is known only to the server."""

    sample: CsrSample
    origin: int
    dummy: bool = False


class DeviceRelay(BaseModel):
    device_id: int
    public: SdiVector
    dummies: List[int]
    privacy: float
    short: bool


class RelayResult(BaseModel):
    aggregated: SdiVector
    payloads: List[SeedPayload]
    devices: List[DeviceRelay]

    @property
    def dummy_count(self) -> int:
        return sum(len(d.dummies) for d in self.devices)


class RelayContext(BaseModel):
    """What the relay phase needs from a run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    private: Dict[int, SdiVector]
    data: Dict[int, LocalDataset]
    seeds_per_label: int = DEFAULT_SEEDS_PER_LABEL
    compression: float = DEFAULT_COMPRESSION
    d_min: int = DEFAULT_D_MIN
    master_seed: int = 0


def _stream(ctx: RelayContext, scope: str, *index: int) -> np.random.Generator:
    return stream(ctx.master_seed, scope, *index)


def _real_seeds(ctx: RelayContext, device_id: int, label: int) -> List[CsrSample]:
    data = ctx.data[device_id]
    pool = np.flatnonzero(data.labels == label)
    take = min(ctx.seeds_per_label, pool.size)
    if take == 0:
        return []
    rng = _stream(ctx, "seeds", device_id, label)
    chosen = np.sort(rng.choice(pool, size=take, replace=False))
    return [
        compress_sample(
            data[int(i)],
            ctx.compression,
            ctx.master_seed,
            data.layout,
            index=(device_id, int(i)),
        )
        for i in chosen
    ]


def _dummy_seeds(
    ctx: RelayContext, device_id: int, label: int, layout: Tuple[int, int]
) -> List[CsrSample]:
    """Noise samples with as many nonzeros as a compressed real seed."""
    d = layout[0] * layout[1]
    nnz = d - int(np.floor(ctx.compression * d))
    rng = _stream(ctx, "dummy", device_id, label)
    out = []
    for _ in range(ctx.seeds_per_label):
        x = np.zeros(d)
        x[rng.choice(d, size=nnz, replace=False)] = rng.uniform(0.01, 1.0, size=nnz)
        out.append(encode_csr(x, layout, label))
    return out


def relay_hop(
    chain: HopChain,
    ctx: RelayContext,
    fed: Optional[Federation] = None,
    round_idx: int = 0,
) -> RelayResult:
    """Run one chain from its first device to the server.

    Every hop forwards the cumulative public SDI and every seed gathered so
    far; with ``fed`` given, each hop is charged as an uplink transmission.
    """
    inherited = SdiVector.zeros(len(next(iter(ctx.private.values()))))
    payloads: List[SeedPayload] = []
    reports: List[DeviceRelay] = []
    path = chain.path

    for hop, device_id in enumerate(chain.devices):
        private = ctx.private[device_id]
        layout = ctx.data[device_id].layout
        rng = _stream(ctx, "sdi", device_id)
        built = make_public_sdi(private, inherited, ctx.d_min, rng)
        for label in built.new_indicators:
            dummy = label in built.dummies
            if dummy:
                seeds = _dummy_seeds(ctx, device_id, label, layout)
            else:
                seeds = _real_seeds(ctx, device_id, label)
            payloads += [
                SeedPayload(sample=s, origin=device_id, dummy=dummy) for s in seeds
            ]
        reports.append(
            DeviceRelay(
                device_id=device_id,
                public=built.public,
                dummies=built.dummies,
                privacy=privacy(private, built.public),
                short=built.short,
            )
        )
        if fed is not None:
            message = [built.public] + [p.sample for p in payloads]
            fed.send(
                message, "uplink", round_idx, path[hop], path[hop + 1], kind="relay"
            )
        inherited = built.public

    return RelayResult(
        aggregated=SdiVector(bits=inherited.bits, kind="aggregated"),
        payloads=payloads,
        devices=reports,
    )


class AugmenterModel(BaseModel):
    """Shared PCA basis plus a diagonal Gaussian per fitted label in PCA space.

    ``residuals`` holds each label's per-dimension variance left outside the
    basis; synthesized samples get isotropic noise of that size in the
    orthogonal complement.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    basis: PcaBasis
    means: Dict[int, np.ndarray]
    variances: Dict[int, np.ndarray]
    residuals: Dict[int, float] = Field(default_factory=dict)
    counts: Dict[int, int]
    num_labels: int
    bounded: bool = False

    @property
    def labels(self) -> List[int]:
        return sorted(self.means)

    def label_mean(self, label: int) -> np.ndarray:
        """The label's mean mapped back to input space."""
        self._require(label)
        return pca_reconstruct(self.basis, self.means[label])

    def _require(self, label: int) -> None:
        if label not in self.means:
            raise UnfittedLabelError(
                "augmenter has no model for this label", label=label
            )

    def payload_bytes(self, wire_bytes: int) -> int:
        # per label: mean and variance in PCA space plus the residual variance
        k, d = self.basis.k, self.basis.input_dim
        return (k * d + d + len(self.means) * (2 * k + 1)) * wire_bytes


def _shrink(
    values: Dict[int, np.ndarray], dof: Dict[int, int]
) -> Dict[int, np.ndarray]:
    total = sum(dof.values())
    pooled = sum(dof[label] * values[label] for label in values) / total
    return {
        label: (dof[label] * v + AUGMENTER_SHRINKAGE * pooled)
        / (dof[label] + AUGMENTER_SHRINKAGE)
        for label, v in values.items()
    }


def fit_augmenter(
    seeds: Dataset, k: int, compression: float = 0.0
) -> AugmenterModel:
    """Fit on decoded seeds; labels with fewer than two seeds are left out.

    ``k`` is clamped to the rank the pooled seeds support. With
    ``compression`` > 0 the seeds are taken as masked and rescaled by
    1 / (1 - c), and the variance masking adds (c * E[y_j^2] on input
    dimension j) is removed. Per-label variances are shrunk toward the
    pooled within-label variance so labels with few seeds stay usable.
    """
    if not 0.0 <= compression < 1.0:
        raise InvalidArgumentError(
            "compression must lie in [0, 1)", compression=compression
        )
    counts = seeds.label_counts()
    fittable = [int(label) for label in np.flatnonzero(counts >= 2)]
    if not fittable:
        raise NoFittableLabelError(
            "no label has at least two seed samples", counts=counts.tolist()
        )
    rank = max(1, min(k, len(seeds) - 1, seeds.input_dim))
    basis = pca_fit(seeds, rank)
    z = pca_project(basis, seeds.features)
    residual = seeds.features - pca_reconstruct(basis, z)
    free = seeds.input_dim - basis.k
    weights = basis.components**2

    means, variances, residuals, dof = {}, {}, {}, {}
    for label in fittable:
        mask = seeds.labels == label
        rows = z[mask]
        means[label] = rows.mean(axis=0)
        var = rows.var(axis=0, ddof=1)
        res = residual[mask].var(axis=0, ddof=1).sum() / free if free else 0.0
        if compression > 0:
            noise = compression * np.mean(seeds.features[mask] ** 2, axis=0)
            in_basis = weights @ noise
            var = var - in_basis
            if free:
                res -= (noise.sum() - in_basis.sum()) / free
        variances[label] = np.maximum(var, 0.0)
        residuals[label] = np.array(max(float(res), 0.0))
        dof[label] = int(counts[label]) - 1

    return AugmenterModel(
        basis=basis,
        means=means,
        variances=_shrink(variances, dof),
        residuals={
            label: float(v) for label, v in _shrink(residuals, dof).items()
        },
        counts={label: int(counts[label]) for label in fittable},
        num_labels=seeds.num_labels,
        bounded=seeds.bounded,
    )


def synthesize(
    augmenter: AugmenterModel, label: int, m: int, rng: np.random.Generator
) -> Dataset:
    augmenter._require(label)
    basis = augmenter.basis
    noise = rng.standard_normal((m, basis.k))
    z = augmenter.means[label] + np.sqrt(augmenter.variances[label]) * noise
    features = pca_reconstruct(basis, z).reshape(m, basis.input_dim)
    spread = augmenter.residuals.get(label, 0.0)
    if spread > 0:
        eps = rng.standard_normal((m, basis.input_dim))
        eps -= (eps @ basis.components.T) @ basis.components
        features = features + np.sqrt(spread) * eps
    if augmenter.bounded:
        features = np.clip(features, 0.0, 1.0)
    return Dataset(
        features=features,
        labels=np.full(m, label, dtype=np.int64),
        num_labels=augmenter.num_labels,
        bounded=augmenter.bounded,
    )


def private_sdi(data: Dataset, lack_ratio: float = DEFAULT_LACK_RATIO) -> SdiVector:
    """Labels whose local count falls below ``lack_ratio`` of the largest one."""
    counts = data.label_counts()
    threshold = lack_ratio * counts.max(initial=0)
    lacking = [i for i, c in enumerate(counts) if c < threshold]
    return SdiVector.from_labels(data.num_labels, lacking)


def server_seed_pool(
    payloads: Sequence[SeedPayload], compression: float, template: Dataset
) -> Dataset:
    """Decode real seeds, undoing the masking shrinkage by 1 / (1 - c)."""
    real = [decode_csr(p.sample) for p in payloads if not p.dummy]
    if not real:
        raise NoFittableLabelError("no real seed samples reached the server")
    features = np.stack([s.features for s in real]) / (1.0 - compression)
    if template.bounded:
        features = np.clip(features, 0.0, 1.0)
    return Dataset(
        features=features,
        labels=np.array([s.label for s in real]),
        num_labels=template.num_labels,
        image_shape=template.image_shape,
        bounded=template.bounded,
    )


def augment_to_parity(
    data: LocalDataset,
    lacking: SdiVector,
    augmenter: AugmenterModel,
    rng: np.random.Generator,
) -> LocalDataset:
    """Top up every lacking, fitted label to the device's largest label count."""
    counts = data.label_counts()
    target = int(counts.max(initial=0))
    out: Dataset = data
    for label in lacking.indices:
        if label not in augmenter.means:
            continue
        missing = target - int(counts[label])
        if missing > 0:
            out = out.concat(synthesize(augmenter, label, missing, rng))
    return out  # type: ignore[return-value]


class PrivacyReport(BaseModel):
    per_device: Dict[int, float]
    mean_privacy: float = Field(..., ge=0, le=1)
    hop_count: int
    dummy_count: int
    total_uplink_bytes: int
    dummy_seed_bytes: int
    short_devices: List[int] = Field(default_factory=list)


class MultFaugOutcome(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: ParamVector
    report: PrivacyReport
    augmenter: Optional[AugmenterModel] = None


def run_multfaug(
    fed: Federation,
    rounds: int,
    tau: int,
    lr: float,
    batch_size: int,
    hops: int = 1,
    compression: float = DEFAULT_COMPRESSION,
    d_min: int = DEFAULT_D_MIN,
    seeds_per_label: int = DEFAULT_SEEDS_PER_LABEL,
    pca_components: int = 16,
    augment: bool = True,
    lack_ratio: float = DEFAULT_LACK_RATIO,
    weighting: Weighting = "data",
    payload: Optional[PayloadMode] = None,
) -> MultFaugOutcome:
    """Relay (round 0), augmenter fit and download, then FedAvg on augmented data.

    ``augment=False`` keeps the identical relay phase but trains on the raw
    local data.
    """
    ctx = RelayContext(
        private={d.device_id: private_sdi(d.data, lack_ratio) for d in fed.devices},
        data={d.device_id: d.data for d in fed.devices},
        seeds_per_label=seeds_per_label,
        compression=compression,
        d_min=d_min,
        master_seed=fed.streams.master_seed,
    )
    topology = Topology(kind="multihop_star", num_devices=fed.num_devices, hops=hops)
    ids = [d.device_id for d in fed.devices]
    payloads: List[SeedPayload] = []
    relays: List[DeviceRelay] = []
    for branch in topology.branches():
        chain = HopChain(devices=[ids[i] for i in branch])
        result = relay_hop(chain, ctx, fed, round_idx=0)
        payloads += result.payloads
        relays += result.devices

    dummy_bytes = sum(p.sample.payload_bytes() for p in payloads if p.dummy)
    report = PrivacyReport(
        per_device={r.device_id: r.privacy for r in relays},
        mean_privacy=float(np.mean([r.privacy for r in relays])),
        hop_count=hops,
        dummy_count=sum(len(r.dummies) for r in relays),
        total_uplink_bytes=fed.ledger.total_bytes("uplink"),
        dummy_seed_bytes=dummy_bytes,
        short_devices=[r.device_id for r in relays if r.short],
    )
    logger.info(
        "relay done: mean privacy %.3f, %d dummies",
        report.mean_privacy,
        report.dummy_count,
    )

    augmenter = None
    if augment:
        try:
            pool = server_seed_pool(payloads, compression, fed.devices[0].data)
            augmenter = fit_augmenter(pool, pca_components, compression)
        except NoFittableLabelError as exc:
            logger.warning("no augmenter fitted (%s); training on raw local data", exc)
    if augmenter is not None:
        fed.broadcast(augmenter, 0, kind="augmenter")
        for i, device in enumerate(fed.devices):
            rng = fed.streams.get("augment", device.device_id)
            lacking = ctx.private[device.device_id]
            fed.replace_data(i, augment_to_parity(device.data, lacking, augmenter, rng))

    params = run_fedavg(fed, rounds, tau, lr, batch_size, weighting, payload)
    return MultFaugOutcome(params=params, report=report, augmenter=augmenter)
