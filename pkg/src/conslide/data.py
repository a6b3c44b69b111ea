"""Feature-bag containers, on-disk formats, and the synthetic benchmark.

A slide is represented purely by precomputed features: M region vectors and
M x N patch vectors, all float64. Bags round-trip bit-exactly through the
"CSFB" binary container, datasets are described by JSON-lines manifests,
and a hierarchical Gaussian generator stands in for real feature
extraction so the continual benchmark runs anywhere.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ConfigurationError

CSFB_MAGIC = b"CSFB"
CSFB_VERSION = 1


class BagFormatError(Exception):
    """Base class for container-format failures."""


class BadMagicError(BagFormatError):
    pass


class UnsupportedVersionError(BagFormatError):
    pass


class TruncatedFileError(BagFormatError):
    pass


class ChecksumError(BagFormatError):
    pass


@dataclass
class FeatureBag:
    """One slide: region features [M, C] and patch features [M, N, C]."""

    sample_id: str
    task_id: int
    label: int
    region_features: np.ndarray
    patch_features: np.ndarray

    def __post_init__(self):
        self.region_features = np.ascontiguousarray(self.region_features, dtype=np.float64)
        self.patch_features = np.ascontiguousarray(self.patch_features, dtype=np.float64)
        if self.region_features.ndim != 2:
            raise ValueError(f"region features must be [M, C], got {self.region_features.shape}")
        if self.patch_features.ndim != 3:
            raise ValueError(f"patch features must be [M, N, C], got {self.patch_features.shape}")
        m, c = self.region_features.shape
        if self.patch_features.shape[0] != m or self.patch_features.shape[2] != c:
            raise ValueError(
                f"region {self.region_features.shape} and patch {self.patch_features.shape} "
                "shapes disagree"
            )
        if m < 1 or self.patch_features.shape[1] < 1 or c < 1:
            raise ValueError("bag needs at least one region, one patch, one channel")
        if not (np.all(np.isfinite(self.region_features)) and np.all(np.isfinite(self.patch_features))):
            raise ValueError("bag features must be finite")

    @property
    def num_regions(self) -> int:
        return self.region_features.shape[0]

    @property
    def patches_per_region(self) -> int:
        return self.patch_features.shape[1]

    @property
    def channels(self) -> int:
        return self.region_features.shape[1]


_HEADER = struct.Struct("<IIIII")  # task_id, label, M, N, C


def write_bag(bag: FeatureBag, path):
    """Serialize a bag to the CSFB container (checksummed, little-endian)."""
    region = np.ascontiguousarray(bag.region_features, dtype="<f8").tobytes()
    patch = np.ascontiguousarray(bag.patch_features, dtype="<f8").tobytes()
    payload = region + patch
    blob = (
        CSFB_MAGIC
        + struct.pack("<H", CSFB_VERSION)
        + _HEADER.pack(bag.task_id, bag.label, bag.num_regions, bag.patches_per_region, bag.channels)
        + payload
        + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    )
    Path(path).write_bytes(blob)


def read_bag(path, sample_id: str | None = None) -> FeatureBag:
    """Read a CSFB container; the sample id defaults to the file stem."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != CSFB_MAGIC:
        raise BadMagicError(f"{path}: not a CSFB file")
    if len(raw) < 6:
        raise TruncatedFileError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CSFB_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported CSFB version {version}")
    if len(raw) < 6 + _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header")
    task_id, label, m, n, c = _HEADER.unpack_from(raw, 6)
    body = 6 + _HEADER.size
    nbytes = (m * c + m * n * c) * 8
    if len(raw) != body + nbytes + 4:
        raise TruncatedFileError(
            f"{path}: expected {body + nbytes + 4} bytes, found {len(raw)}"
        )
    payload = raw[body : body + nbytes]
    (crc_stored,) = struct.unpack_from("<I", raw, body + nbytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ChecksumError(f"{path}: payload CRC mismatch")
    region = np.frombuffer(payload[: m * c * 8], dtype="<f8").reshape(m, c)
    patch = np.frombuffer(payload[m * c * 8 :], dtype="<f8").reshape(m, n, c)
    return FeatureBag(
        sample_id=sample_id if sample_id is not None else path.stem,
        task_id=task_id,
        label=label,
        region_features=region.astype(np.float64),
        patch_features=patch.astype(np.float64),
    )


@dataclass
class ManifestEntry:
    sample_id: str
    path: str
    task_id: int
    label: int
    num_regions: int
    patches_per_region: int
    channels: int


@dataclass
class Manifest:
    """A dataset split: one entry per sample plus dataset-level metadata."""

    dataset_name: str
    class_names: list
    entries: list = field(default_factory=list)

    def validate(self):
        seen = set()
        channels = None
        for e in self.entries:
            if e.sample_id in seen:
                raise ValueError(f"duplicate sample id {e.sample_id!r}")
            seen.add(e.sample_id)
            if channels is None:
                channels = e.channels
            elif e.channels != channels:
                raise ValueError(
                    f"inconsistent channel count: {e.channels} vs {channels} ({e.sample_id!r})"
                )
        return self

    def write_jsonl(self, path):
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps(e.__dict__, sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path, dataset_name: str = "", class_names=None):
        entries = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    entries.append(ManifestEntry(**json.loads(line)))
        return cls(dataset_name, class_names or [], entries).validate()


@dataclass
class SyntheticSpec:
    """Parameters of the hierarchical Gaussian benchmark generator.

    Each (task, class) pair owns a mean vector drawn once from
    N(0, sigma_between^2 I). A bag draws its region count from m_range,
    region features from N(mean, I), and patch features as the region
    feature plus N(0, sigma_patch^2 I) noise, so patch means approximate
    region features and the two scales stay coupled.
    """

    num_tasks: int = 4
    classes_per_task: int = 2
    channels: int = 64
    m_range: tuple = (6, 12)
    patches_per_region: int = 16
    sigma_between: float = 4.0
    sigma_patch: float = 0.5
    train_per_class: int = 50
    test_per_class: int = 20
    seed: int = 0
    dataset_name: str = "synthetic"
    class_names: list | None = None

    def __post_init__(self):
        if self.num_tasks < 1 or self.classes_per_task < 1:
            raise ConfigurationError("need at least one task and one class per task")
        if self.channels < 1 or self.patches_per_region < 1:
            raise ConfigurationError("channels and patches_per_region must be positive")
        lo, hi = self.m_range
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"invalid m_range {self.m_range}")
        if self.sigma_between <= 0 or self.sigma_patch < 0:
            raise ConfigurationError("sigma_between must be > 0 and sigma_patch >= 0")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ConfigurationError("per-class sample counts out of range")
        total = self.num_tasks * self.classes_per_task
        if self.class_names is not None and len(self.class_names) != total:
            raise ConfigurationError(
                f"class_names must have {total} entries, got {len(self.class_names)}"
            )

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task

    def task_classes(self, task_id: int) -> list:
        k = self.classes_per_task
        return list(range(task_id * k, (task_id + 1) * k))


# Tumor-subtype benchmark mirror: four two-class datasets, case counts
# scaled down 10x. Metadata only; the features are synthetic.
BENCHMARK_CLASS_NAMES = ["LUAD", "LUSC", "IDC", "ILC", "CCRCC", "PRCC", "ESAD", "ESCC"]
BENCHMARK_TRAIN_COUNTS = [49, 47, 73, 15, 50, 29, 7, 9]
BENCHMARK_TASK_NAMES = ["NSCLC", "BRCA", "RCC", "ESCA"]


def benchmark_spec(**overrides) -> SyntheticSpec:
    """The default 4-task x 2-class benchmark mirror."""
    kwargs = dict(
        num_tasks=4,
        classes_per_task=2,
        dataset_name="wsi-benchmark-mirror",
        class_names=list(BENCHMARK_CLASS_NAMES),
    )
    kwargs.update(overrides)
    return SyntheticSpec(**kwargs)


def generate_synthetic(spec: SyntheticSpec):
    """Generate (train_bags, test_bags) keyed by task id, plus class means.

    Deterministic under spec.seed; every (task, class) pair receives exactly
    the requested number of bags per split.
    """
    rng = np.random.default_rng(spec.seed)
    c = spec.channels
    means = {}
    for t in range(spec.num_tasks):
        for cls in spec.task_classes(t):
            means[cls] = spec.sigma_between * rng.standard_normal(c)
    lo, hi = spec.m_range
    train, test = {}, {}
    for t in range(spec.num_tasks):
        train[t], test[t] = [], []
        for cls in spec.task_classes(t):
            for split, count, out in (
                ("train", spec.train_per_class, train[t]),
                ("test", spec.test_per_class, test[t]),
            ):
                for i in range(count):
                    m = int(rng.integers(lo, hi + 1))
                    regions = means[cls] + rng.standard_normal((m, c))
                    patches = regions[:, None, :] + spec.sigma_patch * rng.standard_normal(
                        (m, spec.patches_per_region, c)
                    )
                    out.append(
                        FeatureBag(
                            sample_id=f"{split}-t{t}-c{cls}-{i:04d}",
                            task_id=t,
                            label=cls,
                            region_features=regions,
                            patch_features=patches,
                        )
                    )
    return train, test, means


def dataset_meta(spec: SyntheticSpec) -> dict:
    names = spec.class_names or [f"class_{i}" for i in range(spec.num_classes)]
    return {
        "name": spec.dataset_name,
        "channels": spec.channels,
        "patches_per_region": spec.patches_per_region,
        "class_names": names,
        "tasks": [
            {
                "task_id": t,
                "name": BENCHMARK_TASK_NAMES[t]
                if spec.class_names == BENCHMARK_CLASS_NAMES and t < len(BENCHMARK_TASK_NAMES)
                else f"task_{t}",
                "class_ids": spec.task_classes(t),
            }
            for t in range(spec.num_tasks)
        ],
        "generator": {
            "num_tasks": spec.num_tasks,
            "classes_per_task": spec.classes_per_task,
            "channels": spec.channels,
            "m_range": list(spec.m_range),
            "patches_per_region": spec.patches_per_region,
            "sigma_between": spec.sigma_between,
            "sigma_patch": spec.sigma_patch,
            "train_per_class": spec.train_per_class,
            "test_per_class": spec.test_per_class,
            "seed": spec.seed,
        },
    }


def write_dataset(spec: SyntheticSpec, out_dir) -> dict:
    """Generate and write a dataset tree: bags/, manifests, dataset.json."""
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    train, test, _ = generate_synthetic(spec)
    meta = dataset_meta(spec)
    for split, by_task in (("train", train), ("test", test)):
        manifest = Manifest(spec.dataset_name, meta["class_names"])
        for t in sorted(by_task):
            for bag in by_task[t]:
                rel = f"bags/{bag.sample_id}.csfb"
                write_bag(bag, out / rel)
                manifest.entries.append(
                    ManifestEntry(
                        sample_id=bag.sample_id,
                        path=rel,
                        task_id=bag.task_id,
                        label=bag.label,
                        num_regions=bag.num_regions,
                        patches_per_region=bag.patches_per_region,
                        channels=bag.channels,
                    )
                )
        manifest.validate().write_jsonl(out / f"{split}_manifest.jsonl")
    with open(out / "dataset.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return meta


def load_dataset(root):
    """Load a dataset tree back into (train, test, meta) keyed by task id."""
    root = Path(root)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path}: dataset metadata not found")
    meta = json.loads(meta_path.read_text())
    splits = {}
    for split in ("train", "test"):
        manifest = Manifest.read_jsonl(
            root / f"{split}_manifest.jsonl", meta["name"], meta["class_names"]
        )
        by_task = {}
        for e in manifest.entries:
            bag = read_bag(root / e.path, sample_id=e.sample_id)
            if (bag.task_id, bag.label) != (e.task_id, e.label):
                raise ValueError(f"{e.sample_id}: manifest and bag header disagree")
            by_task.setdefault(e.task_id, []).append(bag)
        splits[split] = by_task
    return splits["train"], splits["test"], meta


def mock_tiling_geometry(slide_dims, region_px: int = 4096, patch_px: int = 512):
    """Counts of full non-overlapping tiles: (regions M, patches per region N).

    Partial edge tiles are dropped; region_px must be a multiple of patch_px.
    """
    w, h = slide_dims
    if w <= 0 or h <= 0:
        raise ValueError(f"slide dimensions must be positive, got {slide_dims}")
    if region_px <= 0 or patch_px <= 0:
        raise ValueError("tile sizes must be positive")
    if region_px % patch_px != 0:
        raise ConfigurationError(
            f"region size {region_px} is not a multiple of patch size {patch_px}"
        )
    m = (w // region_px) * (h // region_px)
    n = (region_px // patch_px) ** 2
    return m, n
