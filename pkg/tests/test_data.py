import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conslide import data
from conslide.data import (
    BadMagicError,
    ChecksumError,
    FeatureBag,
    Manifest,
    ManifestEntry,
    SyntheticSpec,
    TruncatedFileError,
    UnsupportedVersionError,
    generate_synthetic,
    mock_tiling_geometry,
    read_bag,
    write_bag,
)
from conslide.tensor import ConfigurationError


def make_bag(rng, m=3, n=4, c=5, sample_id="bag", task_id=1, label=2):
    return FeatureBag(
        sample_id=sample_id,
        task_id=task_id,
        label=label,
        region_features=rng.standard_normal((m, c)),
        patch_features=rng.standard_normal((m, n, c)),
    )


class TestBagContainer:
    def test_roundtrip_bit_exact(self, tmp_path):
        bag = make_bag(np.random.default_rng(0))
        path = tmp_path / f"{bag.sample_id}.csfb"
        write_bag(bag, path)
        back = read_bag(path)
        assert back.sample_id == bag.sample_id
        assert (back.task_id, back.label) == (bag.task_id, bag.label)
        np.testing.assert_array_equal(back.region_features, bag.region_features)
        np.testing.assert_array_equal(back.patch_features, bag.patch_features)

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_random_shapes(self, m, n, c, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        bag = make_bag(rng, m, n, c, sample_id=f"s{seed}")
        path = tmp_path_factory.mktemp("bags") / "x.csfb"
        write_bag(bag, path)
        back = read_bag(path, sample_id=bag.sample_id)
        np.testing.assert_array_equal(back.region_features, bag.region_features)
        np.testing.assert_array_equal(back.patch_features, bag.patch_features)

    def test_truncation_detected(self, tmp_path):
        bag = make_bag(np.random.default_rng(1))
        path = tmp_path / "t.csfb"
        write_bag(bag, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-9])
        with pytest.raises(TruncatedFileError):
            read_bag(path)

    def test_payload_corruption_fails_checksum(self, tmp_path):
        bag = make_bag(np.random.default_rng(2))
        path = tmp_path / "c.csfb"
        write_bag(bag, path)
        raw = bytearray(path.read_bytes())
        raw[40] ^= 0x10  # inside the float payload
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            read_bag(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.csfb"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(BadMagicError):
            read_bag(path)

    def test_bad_version(self, tmp_path):
        bag = make_bag(np.random.default_rng(3))
        path = tmp_path / "v.csfb"
        write_bag(bag, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(UnsupportedVersionError):
            read_bag(path)

    def test_bag_validation(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValueError):
            FeatureBag("x", 0, 0, rng.standard_normal((2, 3)), rng.standard_normal((3, 2, 3)))
        with pytest.raises(ValueError):
            FeatureBag("x", 0, 0, np.array([[np.inf, 1.0]]), np.ones((1, 1, 2)))


class TestManifest:
    def test_duplicate_ids_rejected(self):
        e = ManifestEntry("a", "bags/a.csfb", 0, 0, 2, 2, 4)
        manifest = Manifest("d", ["x", "y"], [e, e])
        with pytest.raises(ValueError, match="duplicate"):
            manifest.validate()

    def test_inconsistent_channels_rejected(self):
        entries = [
            ManifestEntry("a", "bags/a.csfb", 0, 0, 2, 2, 4),
            ManifestEntry("b", "bags/b.csfb", 0, 0, 2, 2, 8),
        ]
        with pytest.raises(ValueError, match="channel"):
            Manifest("d", ["x", "y"], entries).validate()

    def test_jsonl_roundtrip(self, tmp_path):
        entries = [
            ManifestEntry("a", "bags/a.csfb", 0, 0, 2, 2, 4),
            ManifestEntry("b", "bags/b.csfb", 0, 1, 3, 2, 4),
        ]
        path = tmp_path / "m.jsonl"
        Manifest("d", ["x", "y"], entries).write_jsonl(path)
        back = Manifest.read_jsonl(path, "d", ["x", "y"])
        assert [e.__dict__ for e in back.entries] == [e.__dict__ for e in entries]


class TestGenerator:
    def test_same_seed_same_bytes(self, tmp_path):
        spec = SyntheticSpec(num_tasks=2, classes_per_task=2, channels=6, m_range=(2, 3),
                             patches_per_region=4, train_per_class=3, test_per_class=2, seed=9)
        a, b = tmp_path / "a", tmp_path / "b"
        data.write_dataset(spec, a)
        data.write_dataset(spec, b)
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()

    def test_label_balance_exact(self):
        spec = SyntheticSpec(num_tasks=3, classes_per_task=2, channels=4, m_range=(1, 2),
                             patches_per_region=2, train_per_class=5, test_per_class=3, seed=1)
        train, test, _ = generate_synthetic(spec)
        for t in range(3):
            train_labels = [b.label for b in train[t]]
            test_labels = [b.label for b in test[t]]
            for cls in spec.task_classes(t):
                assert train_labels.count(cls) == 5
                assert test_labels.count(cls) == 3

    def test_zero_patch_noise_couples_scales_exactly(self):
        spec = SyntheticSpec(num_tasks=1, classes_per_task=2, channels=4, m_range=(2, 3),
                             patches_per_region=3, train_per_class=2, test_per_class=1,
                             sigma_patch=0.0, seed=2)
        train, _, _ = generate_synthetic(spec)
        for bag in train[0]:
            np.testing.assert_array_equal(
                bag.patch_features.mean(axis=1), bag.region_features
            )

    def test_nearest_centroid_oracle_separates_tasks(self):
        spec = SyntheticSpec(num_tasks=4, classes_per_task=2, channels=16, m_range=(6, 12),
                             patches_per_region=8, sigma_between=4.0, sigma_patch=0.5,
                             train_per_class=20, test_per_class=10, seed=3)
        train, test, _ = generate_synthetic(spec)
        for t in range(4):
            centroids = {}
            for cls in spec.task_classes(t):
                feats = [b.region_features.mean(axis=0) for b in train[t] if b.label == cls]
                centroids[cls] = np.mean(feats, axis=0)
            correct = 0
            for bag in test[t]:
                x = bag.region_features.mean(axis=0)
                pred = min(centroids, key=lambda c: float(np.linalg.norm(x - centroids[c])))
                correct += pred == bag.label
            assert correct / len(test[t]) >= 0.95

    def test_dataset_roundtrip(self, tmp_path):
        spec = SyntheticSpec(num_tasks=2, classes_per_task=2, channels=5, m_range=(2, 3),
                             patches_per_region=3, train_per_class=2, test_per_class=2, seed=5)
        data.write_dataset(spec, tmp_path)
        train, test, meta = data.load_dataset(tmp_path)
        assert meta["channels"] == 5
        assert sorted(train) == [0, 1] and sorted(test) == [0, 1]
        orig_train, _, _ = generate_synthetic(spec)
        by_id = {b.sample_id: b for b in orig_train[0] + orig_train[1]}
        for t in train.values():
            for bag in t:
                np.testing.assert_array_equal(bag.region_features, by_id[bag.sample_id].region_features)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ConfigurationError):
            SyntheticSpec(num_tasks=0)
        with pytest.raises(ConfigurationError):
            SyntheticSpec(m_range=(5, 2))
        with pytest.raises(ConfigurationError):
            SyntheticSpec(sigma_between=0.0)


class TestTilingGeometry:
    def test_default_patch_count(self):
        _, n = mock_tiling_geometry((4096, 4096))
        assert n == 64

    def test_two_regions(self):
        m, _ = mock_tiling_geometry((8192, 4096))
        assert m == 2

    def test_partial_tiles_dropped(self):
        m, _ = mock_tiling_geometry((5000, 5000))
        assert m == 1

    def test_indivisible_sizes_rejected(self):
        with pytest.raises(ConfigurationError):
            mock_tiling_geometry((4096, 4096), region_px=4096, patch_px=500)

    def test_non_positive_dims_rejected(self):
        with pytest.raises(ValueError):
            mock_tiling_geometry((0, 4096))
