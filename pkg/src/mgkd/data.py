"""Dataset loading, synthetic desk-scale fixtures, and noise injection.

Images are (N, channels, H, W) float32 in normalized units; labels are an
int64 vector. No operation mutates a split in place, and all randomness is
drawn from explicit seeds.
"""

from __future__ import annotations

import os
import pickle
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError, InvalidArgumentError

DATA_ROOT_ENV = "MGKD_DATA_ROOT"


@dataclass(frozen=True)
class DatasetSplit:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise InvalidArgumentError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise InvalidArgumentError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.class_count < 2:
            raise InvalidArgumentError(f"class_count must be >= 2, got {self.class_count}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise InvalidArgumentError("labels must lie in [0, class_count)")
        if not np.isfinite(self.images).all():
            raise InvalidArgumentError("images must be finite")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def in_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def add_gaussian_noise(split: DatasetSplit, sigma: float, seed: int = 0) -> DatasetSplit:
    """A new split with per-pixel additive N(0, sigma^2) noise.

    ``sigma=0`` returns a bit-identical copy; labels are never touched.
    """
    sigma = float(sigma)
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return replace(split, images=split.images.copy())
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(split.images.shape, dtype=np.float32)
    return replace(split, images=split.images + np.float32(sigma) * noise)


def augment_crop_flip(images: np.ndarray, rng: np.random.Generator, pad: int = 2, flip_prob: float = 0.5) -> np.ndarray:
    """Random-crop (after reflection padding) and horizontal-flip a batch.

    The standard train-time recipe for small image classifiers; returns a
    new array, never touching the input.
    """
    if pad < 0 or not (0.0 <= flip_prob <= 1.0):
        raise InvalidArgumentError(f"bad augmentation params pad={pad}, flip_prob={flip_prob}")
    n, _, h, w = images.shape
    out = images
    if pad > 0:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
        ys = rng.integers(0, 2 * pad + 1, size=n)
        xs = rng.integers(0, 2 * pad + 1, size=n)
        out = np.stack([padded[i, :, ys[i] : ys[i] + h, xs[i] : xs[i] + w] for i in range(n)])
    else:
        out = out.copy()
    if flip_prob > 0:
        flips = rng.random(n) < flip_prob
        out[flips] = out[flips, :, :, ::-1]
    return out


def make_augmenter(pad: int = 2, flip_prob: float = 0.5):
    """An ``(images, rng) -> images`` callable for trainer ``augment_fn`` hooks."""
    return lambda images, rng: augment_crop_flip(images, rng, pad=pad, flip_prob=flip_prob)


def _bilinear_upsample(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of the trailing two axes (corner-aligned)."""
    h, w = a.shape[-2:]
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = a[..., y0[:, None], x0[None, :]] * (1 - wx) + a[..., y0[:, None], x1[None, :]] * wx
    bot = a[..., y1[:, None], x0[None, :]] * (1 - wx) + a[..., y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    reps = n // classes
    labels = np.concatenate([np.repeat(np.arange(classes), reps), np.arange(n - reps * classes)])
    rng.shuffle(labels)
    return labels.astype(np.int64)


def make_blobs_dataset(
    seed: int = 0,
    classes: int = 10,
    train_size: int = 2000,
    val_size: int = 500,
    test_size: int = 1000,
    image_size: int = 16,
    channels: int = 3,
    noise: float = 5.0,
) -> dict[str, DatasetSplit]:
    """Bundled synthetic image-classification fixture.

    Each class has a smooth random prototype image (a low-frequency field
    upsampled from a coarse grid); samples are the prototype plus Gaussian
    pixel noise. All splits are normalized per channel with statistics
    computed on the training split.
    """
    if classes < 2:
        raise InvalidArgumentError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng([int(seed), 3])
    coarse = rng.standard_normal((classes, channels, 4, 4))
    prototypes = _bilinear_upsample(coarse, image_size, image_size).astype(np.float32)

    def build(n: int, name: str) -> DatasetSplit:
        labels = _balanced_labels(n, classes, rng)
        pixels = rng.standard_normal((n, channels, image_size, image_size), dtype=np.float32)
        images = prototypes[labels] + np.float32(noise) * pixels
        return DatasetSplit(images=images, labels=labels, class_count=classes, name=name)

    splits = {
        "train": build(train_size, "train"),
        "val": build(val_size, "val"),
        "test": build(test_size, "test"),
    }
    mean = splits["train"].images.mean(axis=(0, 2, 3), keepdims=True)
    std = splits["train"].images.std(axis=(0, 2, 3), keepdims=True)
    std = np.maximum(std, np.float32(1e-6))
    return {
        name: replace(s, images=(s.images - mean[0]) / std[0]) for name, s in splits.items()
    }


def make_separable_dataset(
    seed: int = 0,
    classes: int = 3,
    dim: int = 8,
    train_size: int = 300,
    val_size: int = 90,
    test_size: int = 120,
    separation: float = 6.0,
) -> dict[str, DatasetSplit]:
    """Linearly separable vector fixture, shaped (N, 1, 1, dim) so any
    backbone that flattens its input can consume it."""
    if classes > dim:
        raise InvalidArgumentError(f"need dim >= classes, got dim={dim}, classes={classes}")
    rng = np.random.default_rng([int(seed), 4])
    means = np.zeros((classes, dim), dtype=np.float32)
    means[np.arange(classes), np.arange(classes)] = separation

    def build(n: int, name: str) -> DatasetSplit:
        labels = _balanced_labels(n, classes, rng)
        x = means[labels] + rng.standard_normal((n, dim), dtype=np.float32)
        return DatasetSplit(
            images=x.reshape(n, 1, 1, dim), labels=labels, class_count=classes, name=name
        )

    return {
        "train": build(train_size, "train"),
        "val": build(val_size, "val"),
        "test": build(test_size, "test"),
    }


def _read_cifar_pickle(path: Path, label_key: bytes) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    try:
        with open(path, "rb") as fh:
            record = pickle.load(fh, encoding="bytes")
        data = np.asarray(record[b"data"], dtype=np.uint8)
        labels = np.asarray(record[label_key], dtype=np.int64)
    except (pickle.UnpicklingError, KeyError, EOFError, ValueError) as exc:
        raise DatasetFormatError(f"{path}: corrupt record ({exc})") from exc
    if data.ndim != 2 or data.shape[1] != 3072 or data.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"{path}: expected (N, 3072) pixel rows matching labels, got {data.shape}"
        )
    images = data.reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _resolve_root(data_root) -> Path:
    if data_root is not None:
        return Path(data_root)
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _split_train_val(images, labels, classes, val_fraction, seed, normalization):
    n = images.shape[0]
    order = np.random.default_rng([int(seed), 5]).permutation(n)
    n_val = int(round(n * val_fraction))
    val_idx, train_idx = order[:n_val], order[n_val:]
    if normalization is None:
        mean = images[train_idx].mean(axis=(0, 2, 3), keepdims=True)[0]
        std = np.maximum(images[train_idx].std(axis=(0, 2, 3), keepdims=True)[0], 1e-6)
    else:
        mean = np.asarray(normalization["mean"], dtype=np.float32).reshape(-1, 1, 1)
        std = np.asarray(normalization["std"], dtype=np.float32).reshape(-1, 1, 1)

    def norm(x):
        return ((x - mean) / std).astype(np.float32)

    return {
        "train": DatasetSplit(norm(images[train_idx]), labels[train_idx], classes, "train"),
        "val": DatasetSplit(norm(images[val_idx]), labels[val_idx], classes, "val"),
    }, (mean, std)


def _load_cifar(root: Path, classes: int, val_fraction, seed, normalization):
    if classes == 10:
        base = root / "cifar-10-batches-py"
        train_files = [base / f"data_batch_{i}" for i in range(1, 6)]
        test_file = base / "test_batch"
        label_key = b"labels"
    else:
        base = root / "cifar-100-python"
        train_files = [base / "train"]
        test_file = base / "test"
        label_key = b"fine_labels"
    images, labels = [], []
    for f in train_files:
        im, lab = _read_cifar_pickle(f, label_key)
        images.append(im)
        labels.append(lab)
    splits, (mean, std) = _split_train_val(
        np.concatenate(images), np.concatenate(labels), classes, val_fraction, seed, normalization
    )
    test_im, test_lab = _read_cifar_pickle(test_file, label_key)
    splits["test"] = DatasetSplit(
        ((test_im - mean) / std).astype(np.float32), test_lab, classes, "test"
    )
    return splits


def load_dataset(
    name: str,
    data_root=None,
    seed: int = 0,
    normalization: dict | None = None,
    val_fraction: float = 0.1,
    **kwargs,
) -> dict[str, DatasetSplit]:
    """Load a dataset by name into train/val/test splits.

    ``"blobs"`` and ``"separable"`` are bundled synthetic fixtures whose
    generation knobs pass through ``kwargs``. ``"cifar10"``/``"cifar100"``
    read the canonical python-pickle directory layouts under ``data_root``
    (falling back to the ``MGKD_DATA_ROOT`` environment variable).
    Split membership is deterministic given the seed.
    """
    if name == "blobs":
        return make_blobs_dataset(seed=seed, **kwargs)
    if name == "separable":
        return make_separable_dataset(seed=seed, **kwargs)
    if name in ("cifar10", "cifar100"):
        classes = 10 if name == "cifar10" else 100
        return _load_cifar(_resolve_root(data_root), classes, val_fraction, seed, normalization)
    raise InvalidArgumentError(
        f"unknown dataset {name!r}; valid names: blobs, separable, cifar10, cifar100"
    )
