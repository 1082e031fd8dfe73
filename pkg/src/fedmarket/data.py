"""Dataset generation, market partitioning, and IDX loading.

Builds the per-owner training shards, per-consumer validation shards, and the
unlabeled public pool used for distillation, following the group construction
where shared classes are held by one owner group and each consumer's unique
classes by its own group.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxParseError(ValueError):
    """Raised when an IDX file is malformed; the message carries a byte offset."""


@dataclass(frozen=True)
class LabeledDataset:
    """Immutable feature matrix plus integer labels in [0, num_classes)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError("features must be a (n, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels must align with features")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise ValueError("label outside the declared class universe")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class UnlabeledDataset:
    features: np.ndarray

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError("features must be a (n, d) matrix")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class PartitionSpec:
    """Market data layout: consumer/owner counts and shard sizes.

    ``n_c`` classes of interest per consumer, half of them shared by all
    consumers; owners split into ``n_dc + 1`` equal groups (group 0 holds the
    shared classes, group i the unique classes of consumer i-1).
    """

    n_dc: int
    n_do: int
    n_c: int
    samples_per_do: int
    samples_per_val: int
    public_size: int
    seed: int
    shared_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.n_dc < 1 or self.n_do < 1:
            raise ConfigError("need at least one consumer and one owner")
        if self.n_c < 2 or self.n_c % 2 != 0:
            raise ConfigError(f"n_c must be a positive even number, got {self.n_c}")
        if self.shared_fraction != 0.5:
            raise ConfigError("the group construction requires shared_fraction = 0.5")
        if self.n_do % (self.n_dc + 1) != 0:
            raise ConfigError(
                f"n_do={self.n_do} must divide into {self.n_dc + 1} equal owner groups"
            )

    @property
    def n_shared(self) -> int:
        return self.n_c // 2

    @property
    def owners_per_group(self) -> int:
        return self.n_do // (self.n_dc + 1)


@dataclass(frozen=True)
class MarketPartition:
    """Output of :func:`build_market_partition`."""

    do_shards: list[LabeledDataset]
    do_groups: list[int]
    dc_label_sets: list[frozenset[int]]
    dc_val_shards: list[LabeledDataset]
    public: UnlabeledDataset
    shared_labels: frozenset[int]


def gen_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int | list[int],
    scale: float = 1.0,
) -> LabeledDataset:
    """Isotropic Gaussian clusters centered on distinct scaled hypercube vertices."""
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if num_classes > 2**dim:
        raise ValueError(f"cannot place {num_classes} distinct means on a {dim}-cube")
    rng = np.random.default_rng(seed)
    means = _distinct_vertices(num_classes, dim, rng) * scale
    feats = np.concatenate(
        [m + rng.normal(0.0, spread, size=(per_class, dim)) for m in means]
    )
    labels = np.repeat(np.arange(num_classes), per_class)
    return LabeledDataset(feats, labels, num_classes)


def _distinct_vertices(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """k distinct points of {-1, +1}^dim, sampled without replacement."""
    if dim <= 12:
        codes = rng.choice(2**dim, size=k, replace=False)
    else:
        seen: set[int] = set()
        codes = []
        while len(codes) < k:
            c = int(rng.integers(0, 2**dim))
            if c not in seen:
                seen.add(c)
                codes.append(c)
    bits = (np.array(codes, dtype=np.int64)[:, None] >> np.arange(dim)) & 1
    return bits * 2.0 - 1.0


def build_market_partition(spec: PartitionSpec, base: LabeledDataset) -> MarketPartition:
    """Carve disjoint owner/validation/public shards out of ``base``.

    Consumer i gets n_c classes: the shared block plus its own unique block.
    Group-0 owners hold only shared classes; group-i owners hold only consumer
    i-1's unique classes. Every shard is class-balanced.
    """
    need_classes = (spec.n_dc + 1) * spec.n_shared
    if base.num_classes < need_classes:
        raise ConfigError(
            f"base dataset has {base.num_classes} classes, construction needs {need_classes}"
        )
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(base.num_classes)
    shared = frozenset(int(c) for c in perm[: spec.n_shared])
    unique_blocks = [
        frozenset(int(c) for c in perm[spec.n_shared + i * spec.n_shared : spec.n_shared + (i + 1) * spec.n_shared])
        for i in range(spec.n_dc)
    ]
    dc_label_sets = [shared | blk for blk in unique_blocks]

    pools = _class_pools(base, rng)
    group_labels = [shared, *unique_blocks]

    do_shards: list[LabeledDataset] = []
    do_groups: list[int] = []
    for group, labels in enumerate(group_labels):
        for _ in range(spec.owners_per_group):
            do_shards.append(
                _draw_balanced(base, pools, labels, spec.samples_per_do)
            )
            do_groups.append(group)

    dc_val_shards = [
        _draw_balanced(base, pools, dc_label_sets[i], spec.samples_per_val)
        for i in range(spec.n_dc)
    ]

    public_labeled = _draw_balanced(
        base, pools, frozenset(range(base.num_classes)), spec.public_size
    )
    order = rng.permutation(len(public_labeled))
    public = UnlabeledDataset(public_labeled.features[order])

    return MarketPartition(do_shards, do_groups, dc_label_sets, dc_val_shards, public, shared)


def _class_pools(base: LabeledDataset, rng: np.random.Generator) -> dict[int, list[int]]:
    pools: dict[int, list[int]] = {}
    for c in range(base.num_classes):
        idx = np.flatnonzero(base.labels == c)
        rng.shuffle(idx)
        pools[c] = idx.tolist()
    return pools


def _draw_balanced(
    base: LabeledDataset,
    pools: dict[int, list[int]],
    labels: frozenset[int],
    total: int,
) -> LabeledDataset:
    """Take ``total`` samples evenly over ``labels`` (within +-1), consuming pools."""
    classes = sorted(labels)
    per, extra = divmod(total, len(classes))
    take: list[int] = []
    for j, c in enumerate(classes):
        count = per + (1 if j < extra else 0)
        pool = pools[c]
        if len(pool) < count:
            raise ConfigError(
                f"class {c}: need {count} more samples, only {len(pool)} left in base"
            )
        take.extend(pool[:count])
        del pool[:count]
    idx = np.array(take, dtype=np.intp)
    return LabeledDataset(base.features[idx], base.labels[idx], base.num_classes)


def take_class_balanced(
    base: LabeledDataset, labels: frozenset[int] | set[int], total: int, seed: int | list[int]
) -> LabeledDataset:
    """Non-consuming balanced slice over ``labels``; e.g. held-out test shards."""
    rng = np.random.default_rng(seed)
    pools = _class_pools(base, rng)
    return _draw_balanced(base, pools, frozenset(labels), total)


def split_per_class(ds: LabeledDataset, first_count: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Split each class's samples into the first ``first_count`` and the rest.

    Keeps the two halves on the same class distribution, e.g. a train pool
    and a held-out test pool drawn from one generated dataset.
    """
    first: list[int] = []
    rest: list[int] = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < first_count:
            raise ConfigError(
                f"class {c}: cannot split off {first_count} samples, only {len(idx)} present"
            )
        first.extend(idx[:first_count])
        rest.extend(idx[first_count:])
    fi = np.array(first, dtype=np.intp)
    ri = np.array(rest, dtype=np.intp)
    return (
        LabeledDataset(ds.features[fi], ds.labels[fi], ds.num_classes),
        LabeledDataset(ds.features[ri], ds.labels[ri], ds.num_classes),
    )


def load_idx(
    images_path: str | Path, labels_path: str | Path, num_classes: int | None = None
) -> LabeledDataset:
    """Load an IDX image/label file pair; pixels scaled to [0, 1] and flattened."""
    images, rows, cols = _read_idx_images(Path(images_path))
    labels = _read_idx_labels(Path(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise IdxParseError(
            f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    feats = images.reshape(images.shape[0], rows * cols).astype(float) / 255.0
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return LabeledDataset(feats, labels.astype(np.int64), k)


def _read_idx_images(path: Path) -> tuple[np.ndarray, int, int]:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise IdxParseError(f"{path}: truncated header at offset {len(raw)}")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise IdxParseError(f"{path}: bad image magic {magic:#010x} at offset 0")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise IdxParseError(
            f"{path}: expected {expected} bytes, got {len(raw)} (mismatch at offset {min(expected, len(raw))})"
        )
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    return data.reshape(count, rows, cols), rows, cols


def _read_idx_labels(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 8:
        raise IdxParseError(f"{path}: truncated header at offset {len(raw)}")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABEL_MAGIC:
        raise IdxParseError(f"{path}: bad label magic {magic:#010x} at offset 0")
    expected = 8 + count
    if len(raw) != expected:
        raise IdxParseError(
            f"{path}: expected {expected} bytes, got {len(raw)} (mismatch at offset {min(expected, len(raw))})"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=8).copy()
