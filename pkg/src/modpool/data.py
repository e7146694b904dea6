"""Domain datasets, class splits, episode sampling and the FSDS1 container."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"FSDS1"
VERSION = 1


class FormatError(ValueError):
    """A binary container could not be parsed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CapacityError(ValueError):
    """Not enough classes or examples to build the requested episode."""


class IncompatibleDomainsError(ValueError):
    pass


class TooFewClassesError(ValueError):
    pass


@dataclass
class DomainDataset:
    name: str
    feature_dim: int
    classes: list[np.ndarray]  # one (n_i, feature_dim) float32 array per class

    def __post_init__(self):
        for c, arr in enumerate(self.classes):
            if arr.ndim != 2 or arr.shape[1] != self.feature_dim:
                raise ValueError(f"{self.name}: class {c} has shape {arr.shape}, "
                                 f"expected (n, {self.feature_dim})")
            if arr.shape[0] < 1:
                raise ValueError(f"{self.name}: class {c} is empty")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{self.name}: class {c} holds non-finite values")

    @property
    def class_count(self) -> int:
        return len(self.classes)

    def __eq__(self, other):
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (self.name == other.name and self.feature_dim == other.feature_dim
                and len(self.classes) == len(other.classes)
                and all(np.array_equal(a, b) for a, b in zip(self.classes, other.classes)))


@dataclass(frozen=True)
class ClassSplit:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]

    def part(self, name: str) -> tuple[int, ...]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split part {name!r}")
        return getattr(self, name)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_sizes(class_count: int) -> tuple[int, int, int]:
    """(train, val, test) sizes: floor(70%), floor(15%), remainder."""
    n_train = class_count * 70 // 100
    n_val = class_count * 15 // 100
    return n_train, n_val, class_count - n_train - n_val


def split_classes(class_count: int, seed: int, sizes: Sequence[int] | None = None) -> ClassSplit:
    """Shuffle class indices with ``seed`` and cut them into train/val/test.

    ``sizes`` overrides the default proportions when a dataset ships an
    explicit split.
    """
    if class_count < 3:
        raise TooFewClassesError(f"need at least 3 classes to split, got {class_count}")
    if sizes is None:
        sizes = split_sizes(class_count)
    n_train, n_val, n_test = (int(s) for s in sizes)
    if n_train + n_val + n_test != class_count or min(n_train, n_val, n_test) < 0:
        raise ValueError(f"split sizes {tuple(sizes)} do not partition {class_count} classes")
    order = np.random.default_rng(seed).permutation(class_count)
    return ClassSplit(
        train=tuple(int(c) for c in order[:n_train]),
        val=tuple(int(c) for c in order[n_train:n_train + n_val]),
        test=tuple(int(c) for c in order[n_train + n_val:]),
    )


@dataclass
class Episode:
    way: int
    shot: int
    queries: int
    support_x: np.ndarray  # (way*shot, d), class-major: rows [c*shot:(c+1)*shot] are class c
    support_y: np.ndarray
    query_x: np.ndarray  # (way*queries, d), class-major
    query_y: np.ndarray
    domain_name: str | None = None
    # (class index in the dataset, example index) per row, for provenance checks
    support_src: np.ndarray | None = field(default=None, repr=False)
    query_src: np.ndarray | None = field(default=None, repr=False)

    def anonymous(self) -> "Episode":
        """The same episode with its domain provenance removed."""
        return replace(self, domain_name=None, support_src=None, query_src=None)


def sample_episode(dataset: DomainDataset, classes: Sequence[int], way: int, shot: int,
                   queries: int, rng: np.random.Generator) -> Episode:
    """Draw an N-way K-shot episode with T queries per class from ``classes``."""
    classes = list(classes)
    if len(classes) < way:
        raise CapacityError(
            f"{dataset.name}: {way}-way episode needs {way} classes, split has {len(classes)} "
            f"(short by {way - len(classes)})")
    need = shot + queries
    chosen = rng.choice(len(classes), size=way, replace=False)
    sx, sy, qx, qy, ssrc, qsrc = [], [], [], [], [], []
    for label, pick in enumerate(chosen):
        c = classes[int(pick)]
        pool = dataset.classes[c]
        if pool.shape[0] < need:
            raise CapacityError(
                f"{dataset.name}: class {c} has {pool.shape[0]} examples, episode needs {need} "
                f"(short by {need - pool.shape[0]})")
        idx = rng.choice(pool.shape[0], size=need, replace=False)
        sx.append(pool[idx[:shot]])
        qx.append(pool[idx[shot:]])
        sy.append(np.full(shot, label, dtype=np.int64))
        qy.append(np.full(queries, label, dtype=np.int64))
        ssrc.append(np.stack([np.full(shot, c), idx[:shot]], axis=1))
        qsrc.append(np.stack([np.full(queries, c), idx[shot:]], axis=1))
    return Episode(
        way=way, shot=shot, queries=queries,
        support_x=np.concatenate(sx), support_y=np.concatenate(sy),
        query_x=np.concatenate(qx), query_y=np.concatenate(qy),
        domain_name=dataset.name,
        support_src=np.concatenate(ssrc), query_src=np.concatenate(qsrc),
    )


@dataclass
class AggregateDataset:
    x: np.ndarray  # (n, d)
    y: np.ndarray  # global class ids
    domain: list[str]  # domain name per example
    class_count: int


def aggregate_classes(domains: Sequence[DomainDataset], splits: Sequence[ClassSplit]) -> AggregateDataset:
    """Pool the train-split classes of every domain under fresh contiguous ids."""
    if not domains:
        raise ValueError("aggregate_classes needs at least one domain")
    dim = domains[0].feature_dim
    xs, ys, names = [], [], []
    next_id = 0
    for ds, split in zip(domains, splits, strict=True):
        if ds.feature_dim != dim:
            raise IncompatibleDomainsError(
                f"feature_dim mismatch: {domains[0].name} has {dim}, {ds.name} has {ds.feature_dim}")
        for c in split.train:
            arr = ds.classes[c]
            xs.append(arr)
            ys.append(np.full(arr.shape[0], next_id, dtype=np.int64))
            names.extend([ds.name] * arr.shape[0])
            next_id += 1
    return AggregateDataset(np.concatenate(xs).astype(np.float32), np.concatenate(ys), names, next_id)


# ---------------------------------------------------------------------------
# synthetic domains

TRANSFORMS = ("rotation", "axis_mask", "frequency")


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Recipe for one generated domain.

    ``transform_params`` depend on ``transform``:
    rotation -> plane rotation angles in radians (plane k rotates dims k and
    k + feature_dim // 2, so the two halves of the space get mixed);
    axis_mask -> indices of the kept dimensions (the rest become clutter);
    frequency -> angular frequency per dimension (a single value applies to
    all dimensions): x_j -> sin(omega_j * x_j).

    ``cluster_spread`` is the within-class noise scale, either one value or
    one value per dimension (applied before the transform).
    """

    name: str
    feature_dim: int
    class_count: int
    examples_per_class: int
    cluster_spread: float | tuple[float, ...]
    transform: str
    transform_params: tuple[float, ...] = ()
    seed: int = 0
    split: tuple[int, int, int] | None = None

    def validate(self):
        if self.class_count < 5:
            raise ValueError(f"{self.name}: class_count must be >= 5, got {self.class_count}")
        if self.feature_dim < 1 or self.examples_per_class < 1:
            raise ValueError(f"{self.name}: feature_dim and examples_per_class must be positive")
        spread = np.atleast_1d(np.asarray(self.cluster_spread, dtype=np.float64))
        if spread.size not in (1, self.feature_dim) or np.any(spread < 0) or not np.all(np.isfinite(spread)):
            raise ValueError(f"{self.name}: cluster_spread must be 1 or {self.feature_dim} "
                             f"non-negative values, got {self.cluster_spread}")
        if self.transform not in TRANSFORMS:
            raise ValueError(f"{self.name}: unknown transform {self.transform!r}")
        if self.transform == "rotation" and len(self.transform_params) > self.feature_dim // 2:
            raise ValueError(f"{self.name}: {len(self.transform_params)} rotation angles, "
                             f"at most {self.feature_dim // 2} planes in {self.feature_dim} dims")
        if self.transform == "axis_mask":
            bad = [k for k in self.transform_params if not 0 <= int(k) < self.feature_dim]
            if bad:
                raise ValueError(f"{self.name}: mask dims {bad} outside 0..{self.feature_dim - 1}")
        if self.transform == "frequency" and len(self.transform_params) not in (1, self.feature_dim):
            raise ValueError(f"{self.name}: frequency needs 1 or {self.feature_dim} values, "
                             f"got {len(self.transform_params)}")
        if self.split is not None and sum(self.split) != self.class_count:
            raise ValueError(f"{self.name}: split {self.split} does not sum to {self.class_count}")


# clutter amplitude for masked-out dimensions, relative to unit-variance signal
MASK_CLUTTER = 2.0


def apply_transform(x: np.ndarray, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    d = spec.feature_dim
    if spec.transform == "rotation":
        out = x.copy()
        half = d // 2
        for k, angle in enumerate(spec.transform_params):
            i, j = k, k + half
            c, s = np.cos(angle), np.sin(angle)
            xi, xj = out[:, i].copy(), out[:, j].copy()
            out[:, i] = c * xi - s * xj
            out[:, j] = s * xi + c * xj
        return out
    if spec.transform == "axis_mask":
        keep = np.zeros(d, dtype=bool)
        keep[[int(k) for k in spec.transform_params]] = True
        clutter = MASK_CLUTTER * rng.standard_normal(x.shape)
        return np.where(keep, x, clutter)
    omega = np.broadcast_to(np.asarray(spec.transform_params, dtype=np.float64), (d,))
    return np.sin(omega * x)


def gen_synthetic_domain(spec: SyntheticDomainSpec) -> DomainDataset:
    """Gaussian class clusters pushed through the domain's transform."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centers = rng.standard_normal((spec.class_count, spec.feature_dim))
    spread = np.broadcast_to(np.asarray(spec.cluster_spread, dtype=np.float64), (spec.feature_dim,))
    classes = []
    for c in range(spec.class_count):
        noise = rng.standard_normal((spec.examples_per_class, spec.feature_dim))
        raw = centers[c] + spread * noise
        classes.append(apply_transform(raw, spec, rng).astype(np.float32))
    return DomainDataset(spec.name, spec.feature_dim, classes)


# ---------------------------------------------------------------------------
# FSDS1 container


def dataset_to_bytes(ds: DomainDataset) -> bytes:
    name = ds.name.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(name)), name,
             struct.pack("<II", ds.feature_dim, ds.class_count)]
    for arr in ds.classes:
        parts.append(struct.pack("<I", arr.shape[0]))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def write_dataset(ds: DomainDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def dataset_from_bytes(buf: bytes) -> DomainDataset:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC.decode()!r}", 0)
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported FSDS version {version}", r.pos - 4)
    name = r.take(r.u32("name length"), "name").decode("utf-8")
    dim = r.u32("feature_dim")
    count = r.u32("class_count")
    classes = []
    for c in range(count):
        at = r.pos
        n = r.u32(f"example count of class {c}")
        if n == 0:
            raise FormatError(f"class {c} is empty", at)
        at = r.pos
        arr = np.frombuffer(r.take(4 * n * dim, f"values of class {c}"), dtype="<f4")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise FormatError(f"non-finite value in class {c}", at + 4 * bad)
        classes.append(arr.astype(np.float32).reshape(n, dim))
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return DomainDataset(name, dim, classes)


def read_dataset(path) -> DomainDataset:
    return dataset_from_bytes(Path(path).read_bytes())
