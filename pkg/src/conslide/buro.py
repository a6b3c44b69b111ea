"""Breakup-Reorganize rehearsal buffer.

Slides are broken into per-region records (region feature plus its patch
features, tagged with task and label) which stream through a classic
reservoir sample of fixed capacity. Replay draws a uniformly chosen
(task, label) pair, samples stored regions of that pair, and stitches them
into a new augmented bag -- region order carries no information, so the
recombination is free augmentation.

A whole-bag variant of the buffer backs the "replay stored slides as-is"
ablation arm; it reservoir-samples entire bags instead of regions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    BadMagicError,
    FeatureBag,
    TruncatedFileError,
    UnsupportedVersionError,
)

CSBF_MAGIC = b"CSBF"
CSBF_VERSION = 1

# Rough region count of one slide, used to convert a region-denominated
# capacity into a whole-bag capacity for the no-reorganize ablation.
DEFAULT_REGIONS_PER_SLIDE = 220.0


@dataclass
class RegionRecord:
    """One stored region: its feature row, its patches, and its provenance."""

    region_feature: np.ndarray  # [C]
    patch_features: np.ndarray  # [N, C]
    task_id: int
    label: int
    source_id: str

    def __post_init__(self):
        self.region_feature = np.ascontiguousarray(self.region_feature, dtype=np.float64)
        self.patch_features = np.ascontiguousarray(self.patch_features, dtype=np.float64)
        if self.region_feature.ndim != 1 or self.patch_features.ndim != 2:
            raise ValueError(
                f"record needs [C] region and [N, C] patches, got "
                f"{self.region_feature.shape} and {self.patch_features.shape}"
            )
        if self.patch_features.shape[1] != self.region_feature.shape[0]:
            raise ValueError("record region and patch channel counts differ")
        if not (
            np.all(np.isfinite(self.region_feature)) and np.all(np.isfinite(self.patch_features))
        ):
            raise ValueError("record features must be finite")


class RehearsalBuffer:
    """Capacity-bounded reservoir (Algorithm R) of region records."""

    def __init__(self, capacity: int, rng):
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.slots = []
        self.seen_count = 0
        self.rng = rng

    def __len__(self):
        return len(self.slots)

    def insert(self, record: RegionRecord):
        """Reservoir step: append while under capacity, else replace with
        probability capacity/seen_count at a uniform slot."""
        self.seen_count += 1
        if self.capacity == 0:
            return
        if len(self.slots) < self.capacity:
            self.slots.append(record)
            return
        j = self.rng.randrange(self.seen_count)
        if j < self.capacity:
            self.slots[j] = record

    def pairs(self):
        """Sorted (task_id, label) pairs currently present."""
        return sorted({(r.task_id, r.label) for r in self.slots})


def reservoir_insert(buffer: RehearsalBuffer, record: RegionRecord):
    buffer.insert(record)


def breakup(bag: FeatureBag, s: int, rng):
    """Sample min(s, M) distinct regions of a bag, uniformly without replacement."""
    if s < 1:
        raise ValueError(f"breakup size must be >= 1, got {s}")
    m = bag.num_regions
    indices = rng.sample(range(m), min(s, m))
    return [
        RegionRecord(
            region_feature=bag.region_features[i].copy(),
            patch_features=bag.patch_features[i].copy(),
            task_id=bag.task_id,
            label=bag.label,
            source_id=bag.sample_id,
        )
        for i in indices
    ]


def select(buffer: RehearsalBuffer, n: int, rng):
    """Draw replay regions for one uniformly chosen (task, label) pair.

    Returns (records, task_id, label), or None when the buffer is empty --
    the caller simply skips its replay terms. Pair choice is uniform over
    pairs, not proportional to record counts, so minority classes keep
    their replay share.
    """
    if n < 1:
        raise ValueError(f"replay bag size must be >= 1, got {n}")
    pairs = buffer.pairs()
    if not pairs:
        return None
    task_id, label = pairs[rng.randrange(len(pairs))]
    pool = [r for r in buffer.slots if (r.task_id, r.label) == (task_id, label)]
    records = rng.sample(pool, min(n, len(pool)))
    return records, task_id, label


_reorganize_counter = 0


def reorganize(records) -> FeatureBag:
    """Stitch same-(task, label) records into one augmented bag, bit-exactly."""
    if not records:
        raise ValueError("reorganize needs at least one record")
    first = records[0]
    for r in records:
        if (r.task_id, r.label) != (first.task_id, first.label):
            raise ValueError(
                f"mixed (task, label): {(r.task_id, r.label)} vs {(first.task_id, first.label)}"
            )
        if r.patch_features.shape != first.patch_features.shape:
            raise ValueError(
                f"mixed record shapes: {r.patch_features.shape} vs {first.patch_features.shape}"
            )
    global _reorganize_counter
    _reorganize_counter += 1
    return FeatureBag(
        sample_id=f"replay-t{first.task_id}-y{first.label}-{_reorganize_counter}",
        task_id=first.task_id,
        label=first.label,
        region_features=np.stack([r.region_feature for r in records]),
        patch_features=np.stack([r.patch_features for r in records]),
    )


class WholeBagBuffer:
    """Reservoir of entire bags, for the no-reorganize replay arm."""

    def __init__(self, capacity_bags: int, rng):
        if capacity_bags < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity_bags}")
        self.capacity = capacity_bags
        self.slots = []
        self.seen_count = 0
        self.rng = rng

    def __len__(self):
        return len(self.slots)

    def insert(self, bag: FeatureBag):
        self.seen_count += 1
        if self.capacity == 0:
            return
        if len(self.slots) < self.capacity:
            self.slots.append(bag)
            return
        j = self.rng.randrange(self.seen_count)
        if j < self.capacity:
            self.slots[j] = bag

    def pairs(self):
        return sorted({(b.task_id, b.label) for b in self.slots})

    def select(self, rng):
        """One stored bag of a uniformly chosen (task, label) pair, unchanged."""
        pairs = self.pairs()
        if not pairs:
            return None
        task_id, label = pairs[rng.randrange(len(pairs))]
        pool = [b for b in self.slots if (b.task_id, b.label) == (task_id, label)]
        return pool[rng.randrange(len(pool))]


def bag_capacity_from_regions(capacity_regions: int, regions_per_slide: float) -> int:
    """Convert a region-denominated capacity into a bag count (at least 1)."""
    if capacity_regions <= 0:
        return 0
    return max(1, int(round(capacity_regions / regions_per_slide)))


# ---------------------------------------------------------------------------
# snapshot format "CSBF": magic, u16 version, u64 capacity, u64 record count,
# then per record u32 task, u32 label, u32 N, u32 C, float64 LE region
# features followed by patch features.


def save_buffer(buffer, path):
    """Snapshot buffer contents for inspection (region granularity).

    A whole-bag buffer is flattened to its regions so both buffer kinds
    share one snapshot format.
    """
    records = []
    if isinstance(buffer, WholeBagBuffer):
        for bag in buffer.slots:
            for i in range(bag.num_regions):
                records.append(
                    (bag.task_id, bag.label, bag.region_features[i], bag.patch_features[i])
                )
    else:
        records = [
            (r.task_id, r.label, r.region_feature, r.patch_features) for r in buffer.slots
        ]
    with open(path, "wb") as f:
        f.write(CSBF_MAGIC)
        f.write(struct.pack("<H", CSBF_VERSION))
        f.write(struct.pack("<QQ", buffer.capacity, len(records)))
        for task_id, label, region, patches in records:
            n, c = patches.shape
            f.write(struct.pack("<IIII", task_id, label, n, c))
            f.write(np.ascontiguousarray(region, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(patches, dtype="<f8").tobytes())


def _read_exact(f, n: int, path) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise TruncatedFileError(f"{path}: truncated buffer snapshot")
    return raw


def load_buffer_records(path):
    """Read a snapshot back as (capacity, [RegionRecord, ...])."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CSBF_MAGIC:
            raise BadMagicError(f"{path}: not a CSBF snapshot")
        (version,) = struct.unpack("<H", _read_exact(f, 2, path))
        if version != CSBF_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported snapshot version {version}")
        capacity, count = struct.unpack("<QQ", _read_exact(f, 16, path))
        records = []
        for i in range(count):
            task_id, label, n, c = struct.unpack("<IIII", _read_exact(f, 16, path))
            region = np.frombuffer(_read_exact(f, c * 8, path), dtype="<f8")
            patches = np.frombuffer(_read_exact(f, n * c * 8, path), dtype="<f8").reshape(n, c)
            records.append(
                RegionRecord(
                    region_feature=region.astype(np.float64),
                    patch_features=patches.astype(np.float64),
                    task_id=task_id,
                    label=label,
                    source_id=f"{path.stem}#{i}",
                )
            )
        if f.read(1):
            raise TruncatedFileError(f"{path}: trailing bytes after last record")
    return capacity, records
