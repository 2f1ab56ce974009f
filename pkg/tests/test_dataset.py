import json

import numpy as np
import pytest

from evalblocks import dataset, tensorio
from evalblocks.errors import DataError


class TestLoadManifest:
    def test_prostate_mr_style_counts(self, manifest_builder):
        # 219 carcinoma + 219 healthy, balanced
        path = manifest_builder(219, 219, modalities=("T2", "ADC", "DWI"))
        m = dataset.load_manifest(path)
        assert len(m.patches) == 438
        assert m.class_counts() == (219, 219)

    def test_lung_ct_style_counts(self, manifest_builder):
        # 161 malignant and 502 benign nodules
        path = manifest_builder(502, 161)
        m = dataset.load_manifest(path)
        assert m.class_counts() == (502, 161)

    def test_fold_out_of_range(self, manifest_builder):
        path = manifest_builder(6, 6)
        doc = json.loads(path.read_text())
        doc["patches"][0]["fold"] = doc["n_folds"]
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="out of range"):
            dataset.load_manifest(path)

    def test_duplicate_patch_id(self, manifest_builder):
        path = manifest_builder(6, 6)
        doc = json.loads(path.read_text())
        doc["patches"][1]["patch_id"] = doc["patches"][0]["patch_id"]
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="duplicate patch_id"):
            dataset.load_manifest(path)

    def test_missing_modality_entry(self, manifest_builder):
        path = manifest_builder(6, 6, modalities=("T2", "ADC"))
        doc = json.loads(path.read_text())
        del doc["patches"][0]["modalities"]["ADC"]
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="modalities"):
            dataset.load_manifest(path)

    def test_missing_file(self, manifest_builder, tmp_path):
        path = manifest_builder(6, 6)
        victim = json.loads(path.read_text())["patches"][0]["modalities"]["CT"]
        (tmp_path / victim).unlink()
        with pytest.raises(DataError, match="missing file"):
            dataset.load_manifest(path)

    def test_shape_mismatch(self, manifest_builder, tmp_path):
        path = manifest_builder(6, 6)
        victim = json.loads(path.read_text())["patches"][0]["modalities"]["CT"]
        tensorio.write_tensor(tmp_path / victim, np.zeros((3, 3, 3), dtype=np.uint8))
        with pytest.raises(DataError, match="shape"):
            dataset.load_manifest(path)

    def test_single_class_fold_training_portion(self, manifest_builder):
        # all positives in one fold: training portions of that fold lack class 1
        path = manifest_builder(8, 2, n_folds=2)
        doc = json.loads(path.read_text())
        for p in doc["patches"]:
            if p["label"] == 1:
                p["fold"] = 0
        path.write_text(json.dumps(doc))
        with pytest.raises(DataError, match="both classes"):
            dataset.load_manifest(path)


class TestFoldSplit:
    def test_round_robin_counts(self, manifest_builder):
        path = manifest_builder(5, 5)  # folds assigned i % 5 per class
        m = dataset.load_manifest(path)
        train, test = dataset.fold_split(m, 0)
        assert len(test) == 2 and len(train) == 8
        assert set(train).isdisjoint(test)

    def test_partition_over_all_folds(self, manifest_builder):
        m = dataset.load_manifest(manifest_builder(7, 9))
        seen = []
        for fold in range(m.n_folds):
            train, test = dataset.fold_split(m, fold)
            assert sorted(train + test) == sorted(p.patch_id for p in m.patches)
            seen.extend(test)
        assert sorted(seen) == sorted(p.patch_id for p in m.patches)

    def test_fold_out_of_range(self, manifest_builder):
        m = dataset.load_manifest(manifest_builder(5, 5))
        with pytest.raises(DataError):
            dataset.fold_split(m, 5)

    def test_manifest_order_preserved(self, manifest_builder):
        m = dataset.load_manifest(manifest_builder(5, 5))
        order = [p.patch_id for p in m.patches]
        train, test = dataset.fold_split(m, 1)
        assert train == [pid for pid in order if pid not in set(test)]


class TestCentralSlice:
    def test_depth16_takes_index8(self):
        patch = np.stack([np.full((4, 4), d, dtype=np.float32) for d in range(16)], axis=2)
        out = dataset.central_slice(patch)
        assert out.shape == (4, 4)
        assert np.all(out == 8)

    def test_depth1(self):
        patch = np.random.default_rng(0).standard_normal((3, 3, 1)).astype(np.float32)
        assert np.array_equal(dataset.central_slice(patch), patch[:, :, 0])

    def test_matches_brute_force_index_loop(self):
        rng = np.random.default_rng(7)
        patch = rng.standard_normal((5, 6, 7))
        out = dataset.central_slice(patch)
        d = 7 // 2
        for i in range(5):
            for j in range(6):
                assert out[i, j] == patch[i, j, d]

    def test_wrong_rank(self):
        with pytest.raises(DataError, match="rank"):
            dataset.central_slice(np.zeros((4, 4)))


class TestGrayscale:
    def test_three_values(self):
        out = dataset.to_grayscale_u8(np.array([[0.0, 50.0, 100.0]]))
        assert out.tolist() == [[0, 128, 255]]  # 50 -> 127.5 rounds away from zero

    def test_constant_maps_to_128(self):
        out = dataset.to_grayscale_u8(np.full((3, 3), 42.0))
        assert np.all(out == 128)

    def test_endpoints(self):
        out = dataset.to_grayscale_u8(np.array([[-1.0, 1.0]]))
        assert out.tolist() == [[0, 255]]

    def test_non_finite_rejected(self):
        with pytest.raises(DataError, match="non-finite"):
            dataset.to_grayscale_u8(np.array([[1.0, np.nan]]))

    def test_range_and_extremes(self):
        rng = np.random.default_rng(5)
        sl = rng.standard_normal((8, 8)) * 100
        out = dataset.to_grayscale_u8(sl)
        assert out.dtype == np.uint8
        assert out[np.unravel_index(sl.argmin(), sl.shape)] == 0
        assert out[np.unravel_index(sl.argmax(), sl.shape)] == 255


class TestSyntheticGenerator:
    def test_fold_balance(self, tmp_path):
        m = dataset.generate_synthetic_dataset(
            tmp_path / "ds", n_per_class=25, patch_shape=(4, 4, 2), n_folds=5, seed=1
        )
        for fold in range(5):
            _, test = dataset.fold_split(m, fold)
            labels = dict(m.labels())
            per_class = [sum(1 for t in test if labels[t] == c) for c in (0, 1)]
            assert per_class == [5, 5]

    def test_same_seed_byte_identical(self, tmp_path):
        kwargs = dict(n_per_class=6, patch_shape=(3, 3, 2), n_folds=3, seed=9)
        m1 = dataset.generate_synthetic_dataset(tmp_path / "a", **kwargs)
        m2 = dataset.generate_synthetic_dataset(tmp_path / "b", **kwargs)
        for p1, p2 in zip(m1.patches, m2.patches):
            for mod in m1.modalities:
                h1 = tensorio.hash_artifact(m1.patch_path(p1, mod))
                h2 = tensorio.hash_artifact(m2.patch_path(p2, mod))
                assert h1 == h2

    def test_zero_separation_means_close(self, tmp_path):
        m = dataset.generate_synthetic_dataset(
            tmp_path / "ds", n_per_class=20, patch_shape=(8, 8, 4), n_folds=5,
            class_separation=0.0, seed=3,
        )
        voxels = {0: [], 1: []}
        for p in m.patches:
            voxels[p.label].append(tensorio.read_tensor(m.patch_path(p, "CT")).ravel())
        v0, v1 = np.concatenate(voxels[0]), np.concatenate(voxels[1])
        pooled_se = np.sqrt(v0.var() / v0.size + v1.var() / v1.size)
        assert abs(v0.mean() - v1.mean()) < 5 * pooled_se

    def test_multimodal_generation(self, tmp_path):
        m = dataset.generate_synthetic_dataset(
            tmp_path / "ds", n_per_class=5, patch_shape=(3, 3, 2), n_folds=5,
            seed=2, modalities=["T2", "ADC"],
        )
        assert m.modalities == ["T2", "ADC"]
        assert all(set(p.modalities) == {"T2", "ADC"} for p in m.patches)

    def test_rejects_too_few_patches(self, tmp_path):
        with pytest.raises(DataError):
            dataset.generate_synthetic_dataset(tmp_path / "x", n_per_class=3, n_folds=5)
