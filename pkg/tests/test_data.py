"""Dataset fixtures, loaders, and Gaussian-noise injection."""

import hashlib
import pickle

import numpy as np
import pytest

from mgkd import (
    DatasetFormatError,
    InvalidArgumentError,
    add_gaussian_noise,
    load_dataset,
    make_blobs_dataset,
    make_separable_dataset,
)

# sha256 of the first training image of the small fixture, recorded once.
FIRST_IMAGE_DIGEST = "4299c191f41f46f123f7794e4030cd4ee4aaf4422e33052a1efc105ea1471eec"


def _digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


class TestBlobsDataset:
    def test_same_seed_reproduces_split_membership(self):
        a = make_blobs_dataset(seed=3, train_size=100, val_size=30, test_size=40)
        b = make_blobs_dataset(seed=3, train_size=100, val_size=30, test_size=40)
        for name in ("train", "val", "test"):
            np.testing.assert_array_equal(a[name].labels, b[name].labels)
            np.testing.assert_array_equal(a[name].images, b[name].images)

    def test_balanced_label_histogram(self, blobs_small):
        counts = np.bincount(blobs_small["train"].labels, minlength=10)
        assert (counts == counts[0]).all()

    def test_first_image_checksum_is_stable(self, blobs_small):
        assert _digest(blobs_small["train"].images[0]) == FIRST_IMAGE_DIGEST

    def test_normalized_units(self, blobs_small):
        images = blobs_small["train"].images
        assert abs(images.mean()) < 0.05
        assert abs(images.std() - 1.0) < 0.05

    def test_shapes_and_dtypes(self, blobs_small):
        split = blobs_small["train"]
        assert split.images.dtype == np.float32
        assert split.images.shape == (320, 3, 16, 16)
        assert split.labels.dtype == np.int64


class TestSeparableDataset:
    def test_is_linearly_separable_by_construction(self, separable):
        # nearest class mean classifies perfectly at this separation
        train = separable["train"]
        x = train.images.reshape(len(train), -1)
        means = np.stack([x[train.labels == c].mean(axis=0) for c in range(3)])
        pred = ((x[:, None, :] - means[None]) ** 2).sum(axis=2).argmin(axis=1)
        assert (pred == train.labels).mean() == 1.0

    def test_rejects_more_classes_than_dims(self):
        with pytest.raises(InvalidArgumentError):
            make_separable_dataset(classes=9, dim=8)


class TestAddGaussianNoise:
    def test_sigma_zero_is_bit_identical(self, blobs_small):
        noisy = add_gaussian_noise(blobs_small["test"], 0.0, seed=5)
        np.testing.assert_array_equal(noisy.images, blobs_small["test"].images)
        assert noisy.images is not blobs_small["test"].images

    def test_negative_sigma_rejected(self, blobs_small):
        with pytest.raises(InvalidArgumentError):
            add_gaussian_noise(blobs_small["test"], -0.1)

    def test_labels_untouched(self, blobs_small):
        noisy = add_gaussian_noise(blobs_small["test"], 0.2, seed=5)
        np.testing.assert_array_equal(noisy.labels, blobs_small["test"].labels)

    def test_input_not_mutated(self, blobs_small):
        before = blobs_small["test"].images.copy()
        add_gaussian_noise(blobs_small["test"], 0.5, seed=5)
        np.testing.assert_array_equal(blobs_small["test"].images, before)

    def test_noise_statistics(self):
        split = make_blobs_dataset(seed=1, train_size=1400, val_size=10, test_size=10)["train"]
        assert split.images.size > 1_000_000
        sigma = 0.1
        noisy = add_gaussian_noise(split, sigma, seed=9)
        delta = (noisy.images - split.images).astype(np.float64)
        n = delta.size
        assert abs(delta.mean()) < 3 * sigma / np.sqrt(n)
        assert abs(delta.std() - sigma) / sigma < 0.01

    def test_seeded_determinism(self, blobs_small):
        a = add_gaussian_noise(blobs_small["test"], 0.3, seed=17)
        b = add_gaussian_noise(blobs_small["test"], 0.3, seed=17)
        np.testing.assert_array_equal(a.images, b.images)
        c = add_gaussian_noise(blobs_small["test"], 0.3, seed=18)
        assert not np.array_equal(a.images, c.images)


def _write_cifar10_layout(root, n=6):
    base = root / "cifar-10-batches-py"
    base.mkdir(parents=True)
    rng = np.random.default_rng(0)
    for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        record = {
            b"data": rng.integers(0, 256, size=(n, 3072), dtype=np.uint8),
            b"labels": rng.integers(0, 10, size=n).tolist(),
        }
        with open(base / name, "wb") as fh:
            pickle.dump(record, fh)
    return base


class TestCifarLoader:
    def test_loads_canonical_layout(self, tmp_path):
        _write_cifar10_layout(tmp_path)
        splits = load_dataset("cifar10", data_root=tmp_path, seed=0, val_fraction=0.2)
        assert set(splits) == {"train", "val", "test"}
        assert splits["train"].images.shape[1:] == (3, 32, 32)
        assert len(splits["train"]) + len(splits["val"]) == 30
        assert len(splits["test"]) == 6

    def test_split_membership_deterministic(self, tmp_path):
        _write_cifar10_layout(tmp_path)
        a = load_dataset("cifar10", data_root=tmp_path, seed=4, val_fraction=0.2)
        b = load_dataset("cifar10", data_root=tmp_path, seed=4, val_fraction=0.2)
        np.testing.assert_array_equal(a["train"].labels, b["train"].labels)

    def test_missing_files_name_the_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="data_batch_1"):
            load_dataset("cifar10", data_root=tmp_path)

    def test_corrupt_record_reports_format_error(self, tmp_path):
        base = _write_cifar10_layout(tmp_path)
        (base / "data_batch_2").write_bytes(b"this is not a pickle")
        with pytest.raises(DatasetFormatError, match="data_batch_2"):
            load_dataset("cifar10", data_root=tmp_path)

    def test_env_var_supplies_root(self, tmp_path, monkeypatch):
        _write_cifar10_layout(tmp_path)
        monkeypatch.setenv("MGKD_DATA_ROOT", str(tmp_path))
        splits = load_dataset("cifar10")
        assert len(splits["test"]) == 6

    def test_explicit_normalization_stats(self, tmp_path):
        _write_cifar10_layout(tmp_path)
        splits = load_dataset(
            "cifar10",
            data_root=tmp_path,
            normalization={"mean": [0.5, 0.5, 0.5], "std": [0.25, 0.25, 0.25]},
        )
        assert splits["train"].images.min() >= -2.0 - 1e-6
        assert splits["train"].images.max() <= 2.0 + 1e-6


def test_unknown_dataset_name_rejected():
    with pytest.raises(InvalidArgumentError, match="valid names"):
        load_dataset("imagenet")


class TestAugmentation:
    def test_shape_preserved_and_input_untouched(self, blobs_small):
        from mgkd.data import augment_crop_flip

        images = blobs_small["train"].images[:12]
        before = images.copy()
        out = augment_crop_flip(images, np.random.default_rng(0), pad=2, flip_prob=0.5)
        assert out.shape == images.shape
        np.testing.assert_array_equal(images, before)

    def test_deterministic_given_rng_state(self, blobs_small):
        from mgkd.data import augment_crop_flip

        images = blobs_small["train"].images[:12]
        a = augment_crop_flip(images, np.random.default_rng(5))
        b = augment_crop_flip(images, np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_flip_only_path(self, blobs_small):
        from mgkd.data import augment_crop_flip

        images = blobs_small["train"].images[:8]
        out = augment_crop_flip(images, np.random.default_rng(3), pad=0, flip_prob=1.0)
        np.testing.assert_array_equal(out, images[:, :, :, ::-1])

    def test_invalid_params_rejected(self, blobs_small):
        from mgkd.data import augment_crop_flip

        images = blobs_small["train"].images[:2]
        with pytest.raises(InvalidArgumentError):
            augment_crop_flip(images, np.random.default_rng(0), pad=-1)
        with pytest.raises(InvalidArgumentError):
            augment_crop_flip(images, np.random.default_rng(0), flip_prob=1.5)

    def test_trainer_accepts_augmenter(self, blobs_small):
        from mgkd import build_plain_model
        from mgkd.data import make_augmenter
        from mgkd.train import TrainSchedule, train_classifier

        model = build_plain_model("conv", blobs_small["train"].in_shape, (4, 8, 8), 10, seed=0)
        records = train_classifier(
            model,
            blobs_small["train"],
            TrainSchedule(epochs=1, initial_lr=0.01),
            seed=0,
            augment_fn=make_augmenter(pad=2, flip_prob=0.5),
        )
        assert len(records) == 1

    def test_self_analysis_rejects_augment_with_cache(self, conv_bundle, blobs_small):
        from mgkd.data import make_augmenter
        from mgkd.self_analyze import SelfAnalyzeConfig
        from mgkd.train import TrainSchedule
        from mgkd import run_self_analysis

        cfg = SelfAnalyzeConfig(
            schedule=TrainSchedule(epochs=1, initial_lr=0.01), cache_supervision=True
        )
        with pytest.raises(InvalidArgumentError, match="cache_supervision"):
            run_self_analysis(conv_bundle, blobs_small["train"], cfg, augment_fn=make_augmenter())

    def test_self_analysis_trains_with_augmentation(self, conv_bundle, blobs_small):
        from mgkd.data import make_augmenter
        from mgkd.self_analyze import SelfAnalyzeConfig
        from mgkd.train import TrainSchedule
        from mgkd import run_self_analysis

        cfg = SelfAnalyzeConfig(schedule=TrainSchedule(epochs=1, initial_lr=0.01))
        _, records = run_self_analysis(
            conv_bundle, blobs_small["train"], cfg, augment_fn=make_augmenter()
        )
        assert len(records) == 1 and np.isfinite(records[0]["l_ga_akb"])
