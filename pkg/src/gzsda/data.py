"""Feature datasets, file formats, GZSDA task construction and pair sampling."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ccvae import SOURCE, TARGET, PairBatch
from .nn import make_rng
from .seeding import derive_seed

FVEC_MAGIC = b"FVGZ"
FVEC_VERSION = 1


class DatasetFormatError(ValueError):
    """Base class for malformed dataset files."""


class HeaderError(DatasetFormatError):
    pass


class DimensionError(DatasetFormatError):
    pass


class LabelRangeError(DatasetFormatError):
    pass


class TruncationError(DatasetFormatError):
    pass


@dataclass
class FeatureDataset:
    """Rows of (features, class label, domain label) sharing one dimension."""

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    feature_dim: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.feature_dim is None:
            if self.features.ndim != 2:
                raise DimensionError("features must be 2-D when feature_dim is not given")
            self.feature_dim = self.features.shape[1]
        self.features = self.features.reshape(-1, self.feature_dim)
        n = len(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.domains = np.broadcast_to(np.asarray(self.domains, dtype=np.uint8), (n,)).copy()
        if n and self.labels.min() < 0:
            raise LabelRangeError("class labels must be nonnegative")
        if np.any(self.domains > 1):
            raise LabelRangeError("domain labels must be 0 (source) or 1 (target)")

    def __len__(self):
        return len(self.features)

    def subset(self, index) -> "FeatureDataset":
        index = np.asarray(index, dtype=np.int64)
        return FeatureDataset(self.features[index], self.labels[index], self.domains[index], self.feature_dim)

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)

    @classmethod
    def concat(cls, parts) -> "FeatureDataset":
        parts = list(parts)
        return cls(
            np.vstack([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.domains for p in parts]),
            parts[0].feature_dim,
        )


def _fvec_dtype(dim: int) -> np.dtype:
    return np.dtype([("f", "<f4", (dim,)), ("c", "<u2"), ("d", "u1")])


def save_dataset(dataset: FeatureDataset, path, fmt: str | None = None) -> None:
    """Write features as 32-bit floats in CSV or FVEC form."""
    fmt = fmt or _format_from_path(path)
    d = dataset.feature_dim
    if fmt == "fvec":
        records = np.zeros(len(dataset), dtype=_fvec_dtype(d))
        records["f"] = dataset.features.astype(np.float32)
        records["c"] = dataset.labels
        records["d"] = dataset.domains
        with open(path, "wb") as fh:
            fh.write(FVEC_MAGIC + struct.pack("<III", FVEC_VERSION, len(dataset), d))
            fh.write(records.tobytes())
    elif fmt == "csv":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"dim={d}\n")
            for row, c, dom in zip(dataset.features.astype(np.float32), dataset.labels, dataset.domains):
                fh.write(",".join([*(str(v) for v in row), str(int(c)), str(int(dom))]) + "\n")
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


def load_dataset(path, fmt: str | None = None, num_classes: int | None = None) -> FeatureDataset:
    """Read a CSV or FVEC dataset, widening features to float64.

    Labels at or above ``num_classes`` (when given) are rejected.
    """
    fmt = fmt or _format_from_path(path)
    if fmt == "fvec":
        ds = _load_fvec(Path(path))
    elif fmt == "csv":
        ds = _load_csv(Path(path))
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if num_classes is not None and len(ds) and ds.labels.max() >= num_classes:
        row = int(np.argmax(ds.labels >= num_classes))
        raise LabelRangeError(f"{path}: record {row} has class {ds.labels[row]} >= {num_classes}")
    return ds


def _format_from_path(path) -> str:
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix not in ("csv", "fvec"):
        raise ValueError(f"cannot infer dataset format from {path!r}; pass csv or fvec")
    return suffix


def _load_fvec(path: Path) -> FeatureDataset:
    data = path.read_bytes()
    if len(data) < 16 or data[:4] != FVEC_MAGIC:
        raise HeaderError(f"{path}: missing FVGZ magic at offset 0")
    version, n, d = struct.unpack_from("<III", data, 4)
    if version != FVEC_VERSION:
        raise HeaderError(f"{path}: unsupported version {version} at offset 4")
    if d == 0:
        raise HeaderError(f"{path}: feature dimension 0 at offset 12")
    dtype = _fvec_dtype(d)
    expected = 16 + n * dtype.itemsize
    if len(data) < expected:
        have = (len(data) - 16) // dtype.itemsize
        raise TruncationError(f"{path}: header declares {n} records but only {have} complete records present (file ends at offset {len(data)}, expected {expected})")
    if len(data) > expected:
        raise DimensionError(f"{path}: {len(data) - expected} trailing bytes after offset {expected}; records do not match d={d}")
    records = np.frombuffer(data, dtype=dtype, count=n, offset=16)
    if n and records["d"].max() > 1:
        row = int(np.argmax(records["d"] > 1))
        raise LabelRangeError(f"{path}: record {row} at offset {16 + row * dtype.itemsize} has domain {records['d'][row]}")
    return FeatureDataset(records["f"].astype(np.float64), records["c"].astype(np.int64), records["d"], d)


def _load_csv(path: Path) -> FeatureDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("dim="):
        raise HeaderError(f"{path}:1: expected header 'dim=<d>'")
    try:
        d = int(lines[0][4:])
    except ValueError:
        raise HeaderError(f"{path}:1: bad dimension {lines[0][4:]!r}") from None
    if d < 1:
        raise HeaderError(f"{path}:1: dimension must be positive, got {d}")
    feats, labels, domains = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != d + 2:
            raise DimensionError(f"{path}:{lineno}: expected {d} features plus class and domain, got {len(cells)} fields")
        try:
            feats.append(np.array(cells[:d], dtype=np.float32))
            c, dom = int(cells[d]), int(cells[d + 1])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        if c < 0 or c > 0xFFFF:
            raise LabelRangeError(f"{path}:{lineno}: class {c} out of range")
        if dom not in (SOURCE, TARGET):
            raise LabelRangeError(f"{path}:{lineno}: domain {dom} must be 0 or 1")
        labels.append(c)
        domains.append(dom)
    features = np.vstack(feats).astype(np.float64) if feats else np.zeros((0, d))
    return FeatureDataset(features, labels, np.array(domains, dtype=np.uint8), d)


def write_manifest(path, files: dict, class_names: list[str], provenance: dict) -> None:
    manifest = {"files": files, "class_names": class_names, "provenance": provenance}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text(encoding="utf-8"))
    base = path.parent
    manifest["files"] = {k: str(base / v) for k, v in manifest["files"].items()}
    return manifest


@dataclass
class SplitSpec:
    seen_classes: tuple
    unseen_classes: tuple
    target_train_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.seen_classes = tuple(sorted(int(c) for c in self.seen_classes))
        self.unseen_classes = tuple(sorted(int(c) for c in self.unseen_classes))
        if set(self.seen_classes) & set(self.unseen_classes):
            raise ValueError("seen and unseen classes overlap")
        if not 0 < self.target_train_fraction < 1:
            raise ValueError(f"target_train_fraction must lie in (0, 1), got {self.target_train_fraction}")

    @property
    def classes(self) -> tuple:
        return tuple(sorted(self.seen_classes + self.unseen_classes))


def random_splits(num_classes: int, num_unseen: int, num_splits: int, seed: int, target_train_fraction: float = 0.5) -> list[SplitSpec]:
    """Distinct seeded seen/unseen partitions of ``range(num_classes)``."""
    if not 0 < num_unseen < num_classes:
        raise ValueError(f"num_unseen must lie in [1, {num_classes - 1}], got {num_unseen}")
    if num_splits > math.comb(num_classes, num_unseen):
        raise ValueError(f"only {math.comb(num_classes, num_unseen)} distinct partitions exist, asked for {num_splits}")
    rng = make_rng(derive_seed(seed, "class-splits"))
    specs, taken = [], set()
    while len(specs) < num_splits:
        unseen = tuple(sorted(rng.choice(num_classes, size=num_unseen, replace=False).tolist()))
        if unseen in taken:
            continue
        taken.add(unseen)
        seen = [c for c in range(num_classes) if c not in unseen]
        specs.append(SplitSpec(seen, unseen, target_train_fraction, derive_seed(seed, "target-split", len(specs))))
    return specs


@dataclass
class GzsdaTask:
    """One experiment: full labelled source, seen-class target train, target test.

    ``target_train_index`` and ``target_test_index`` index rows of the target
    dataset the task was built from.
    """

    source_train: FeatureDataset
    target_train: FeatureDataset
    target_test: FeatureDataset
    split: SplitSpec
    target_train_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    target_test_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    _by_class: dict = field(default=None, repr=False)

    def target_rows_by_class(self) -> dict:
        if self._by_class is None:
            self._by_class = {int(c): np.flatnonzero(self.target_train.labels == c) for c in self.target_train.classes()}
        return self._by_class


def make_task(source: FeatureDataset, target: FeatureDataset, spec: SplitSpec) -> GzsdaTask:
    """Split the target per class; seen classes give ``floor(fraction * n_k)`` rows to training."""
    if source.feature_dim != target.feature_dim:
        raise DimensionError(f"source dim {source.feature_dim} != target dim {target.feature_dim}")
    universe = set(spec.classes)
    for name, ds in (("source", source), ("target", target)):
        extra = set(ds.classes().tolist()) - universe
        if extra:
            raise ValueError(f"{name} has classes {sorted(extra)} outside the split")
    rng = make_rng(spec.seed)
    train_idx, test_idx = [], []
    for c in spec.classes:
        rows = np.flatnonzero(target.labels == c)
        if c in spec.seen_classes and len(rows) == 0:
            raise ValueError(f"seen class {c} has no target samples; it cannot be paired")
        rows = rows[rng.permutation(len(rows))]
        k = math.floor(spec.target_train_fraction * len(rows)) if c in spec.seen_classes else 0
        if c in spec.seen_classes and k == 0:
            raise ValueError(f"seen class {c} has too few target samples for a training share")
        train_idx.append(rows[:k])
        test_idx.append(rows[k:])
    train_idx = np.sort(np.concatenate(train_idx)).astype(np.int64)
    test_idx = np.sort(np.concatenate(test_idx)).astype(np.int64)
    return GzsdaTask(source, target.subset(train_idx), target.subset(test_idx), spec, train_idx, test_idx)


def sample_pairs(task: GzsdaTask, order: np.ndarray, batch_start: int, batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Pair ``order[batch_start:batch_start + batch_size]`` source rows with random same-class targets.

    Source rows of classes without target data get a zero dummy and
    ``valid_t = False``.
    """
    rows = np.asarray(order[batch_start : batch_start + batch_size], dtype=np.int64)
    src = task.source_train
    labels = src.labels[rows]
    by_class = task.target_rows_by_class()
    counts = np.array([len(by_class.get(int(c), ())) for c in labels], dtype=np.int64)
    valid = counts > 0
    draws = rng.integers(0, np.maximum(counts, 1))
    x_t = np.zeros((len(rows), src.feature_dim))
    for i in np.flatnonzero(valid):
        x_t[i] = task.target_train.features[by_class[int(labels[i])][draws[i]]]
    return PairBatch(src.features[rows], x_t, labels, valid)


@dataclass
class SyntheticConfig:
    """Two-domain Gaussian benchmark.

    Class means sit in a random ``class_subspace_dim``-dimensional subspace with
    pairwise distances of at least ``class_separation``. The target domain maps
    each class mean through one affine map ``A mu + b`` (random rotation times
    per-axis scales in ``scale_range``, bias of norm ``class_separation``) and
    adds fresh isotropic noise. ``shift=False`` makes the map the identity.
    """

    num_classes: int = 10
    feature_dim: int = 32
    samples_per_class_per_domain: int = 200
    class_separation: float = 10.0
    noise_sigma: float = 1.0
    class_subspace_dim: int | None = 3
    scale_range: tuple = (0.5, 2.0)
    shift: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.samples_per_class_per_domain < 1:
            raise ValueError(f"samples_per_class_per_domain must be >= 1, got {self.samples_per_class_per_domain}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.class_subspace_dim is not None and not 1 <= self.class_subspace_dim <= self.feature_dim:
            raise ValueError(f"class_subspace_dim must lie in [1, {self.feature_dim}], got {self.class_subspace_dim}")
        self.scale_range = tuple(self.scale_range)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scale_range"] = list(self.scale_range)
        return out


def _class_means(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    r = cfg.class_subspace_dim or min(cfg.feature_dim, cfg.num_classes)
    basis, _ = np.linalg.qr(rng.standard_normal((cfg.feature_dim, r)))
    sep = cfg.class_separation
    # grow the sampling ball until rejection sampling packs every class
    radius = 0.5 * sep * cfg.num_classes ** (1.0 / r) + sep
    coords: list[np.ndarray] = []
    attempts = 0
    while len(coords) < cfg.num_classes:
        u = rng.standard_normal(r)
        u *= radius * rng.uniform() ** (1.0 / r) / np.linalg.norm(u)
        if all(np.linalg.norm(u - v) >= sep for v in coords):
            coords.append(u)
        attempts += 1
        if attempts % 1000 == 0:
            radius *= 1.1
    return np.array(coords) @ basis.T


def domain_map(cfg: SyntheticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    d = cfg.feature_dim
    if not cfg.shift:
        return np.eye(d), np.zeros(d)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q *= np.sign(np.diag(r))
    scales = rng.uniform(*cfg.scale_range, size=d)
    bias = rng.standard_normal(d)
    bias *= cfg.class_separation / np.linalg.norm(bias)
    return q * scales, bias


def gen_synthetic_benchmark(cfg: SyntheticConfig) -> tuple[FeatureDataset, FeatureDataset]:
    """Return (source, target) datasets with ``samples_per_class_per_domain`` rows per class and domain."""
    means = _class_means(cfg, make_rng(derive_seed(cfg.seed, "class-means")))
    a, b = domain_map(cfg, make_rng(derive_seed(cfg.seed, "domain-map")))
    target_means = means @ a.T + b
    n = cfg.samples_per_class_per_domain
    labels = np.repeat(np.arange(cfg.num_classes), n)
    noise_rng = make_rng(derive_seed(cfg.seed, "noise"))
    x_s = means[labels] + cfg.noise_sigma * noise_rng.standard_normal((len(labels), cfg.feature_dim))
    x_t = target_means[labels] + cfg.noise_sigma * noise_rng.standard_normal((len(labels), cfg.feature_dim))
    return (
        FeatureDataset(x_s, labels, SOURCE, cfg.feature_dim),
        FeatureDataset(x_t, labels, TARGET, cfg.feature_dim),
    )
