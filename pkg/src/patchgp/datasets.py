"""Datasets: rectangles generator, IDX and CIFAR-10 binary loaders,
normalization, and the train/test container.

IDX files are big-endian: a 4-byte magic whose low byte is the dimension
count (2051 for image tensors, 2049 for label vectors), one 4-byte size per
dimension, then raw unsigned bytes. Pixels are scaled to [0, 1] by /255 on
load. Gzipped files are detected by their first two bytes.
"""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .errors import (
    BadLabel,
    BadMagic,
    CountMismatch,
    TruncatedFile,
    ZeroVariance,
)
from .images import ImageBatch

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

NORMALIZE_MODES = ("none", "global-mean-scale")


class Dataset:
    """Train/test image batches with integer labels in {0..num_classes-1}."""

    def __init__(
        self,
        train_images: ImageBatch,
        train_labels: np.ndarray,
        test_images: ImageBatch,
        test_labels: np.ndarray,
        num_classes: int,
        normalization: dict | None = None,
        metadata: dict | None = None,
    ):
        train_labels = np.asarray(train_labels)
        test_labels = np.asarray(test_labels)
        if train_labels.shape[0] != train_images.n:
            raise CountMismatch(
                f"{train_images.n} train images but {train_labels.shape[0]} labels"
            )
        if test_labels.shape[0] != test_images.n:
            raise CountMismatch(
                f"{test_images.n} test images but {test_labels.shape[0]} labels"
            )
        for split, labels in (("train", train_labels), ("test", test_labels)):
            if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
                raise BadLabel(f"{split} labels outside 0..{num_classes - 1}")
        self.train_images = train_images
        self.train_labels = train_labels
        self.test_images = test_images
        self.test_labels = test_labels
        self.num_classes = int(num_classes)
        self.normalization = normalization if normalization is not None else {"mode": "none"}
        self.metadata = metadata


def gen_rectangles(n: int = 1200, seed: int = 0) -> Dataset:
    """n binary 28x28 images of 1-pixel rectangle outlines.

    Side lengths are uniform on {3..25}, resampled while equal; the label is
    1 iff the rectangle is taller than wide. Split is (n - n//6) train to
    n//6 test.
    """
    if n < 2:
        raise CountMismatch("need at least 2 images to split")
    rng = np.random.default_rng(seed)
    size = 28
    images = np.zeros((n, size, size), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    widths = np.empty(n, dtype=np.int64)
    heights = np.empty(n, dtype=np.int64)
    for i in range(n):
        while True:
            w_r = int(rng.integers(3, 26))
            h_r = int(rng.integers(3, 26))
            if w_r != h_r:
                break
        x0 = int(rng.integers(0, size - w_r + 1))
        y0 = int(rng.integers(0, size - h_r + 1))
        img = images[i]
        img[y0, x0 : x0 + w_r] = 1.0
        img[y0 + h_r - 1, x0 : x0 + w_r] = 1.0
        img[y0 : y0 + h_r, x0] = 1.0
        img[y0 : y0 + h_r, x0 + w_r - 1] = 1.0
        labels[i] = 1 if h_r > w_r else 0
        widths[i] = w_r
        heights[i] = h_r
    n_test = n // 6
    n_train = n - n_test
    return Dataset(
        ImageBatch(images[:n_train]),
        labels[:n_train],
        ImageBatch(images[n_train:]),
        labels[n_train:],
        num_classes=2,
        metadata={"widths": widths, "heights": heights, "n_train": n_train, "seed": seed},
    )


def _read_maybe_gzip(path) -> bytes:
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def _parse_idx(data: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedFile(f"{what}: no room for a magic number")
    magic = int.from_bytes(data[:4], "big")
    if magic != expected_magic:
        raise BadMagic(f"{what}: magic {magic}, expected {expected_magic}")
    ndims = magic & 0xFF
    header_end = 4 + 4 * ndims
    if len(data) < header_end:
        raise TruncatedFile(f"{what}: header ends mid-dimension")
    dims = [
        int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndims)
    ]
    count = int(np.prod(dims)) if dims else 0
    if len(data) != header_end + count:
        raise TruncatedFile(
            f"{what}: payload is {len(data) - header_end} bytes, expected {count}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header_end).reshape(dims)


def load_idx(images_path, labels_path, classes=None):
    """(ImageBatch, labels) from an IDX image/label file pair.

    classes, when given, keeps only those labels and renumbers them by
    their sorted order (e.g. {0, 1} -> 0, 1).
    """
    raw_images = _parse_idx(_read_maybe_gzip(images_path), IMAGE_MAGIC, "images")
    raw_labels = _parse_idx(_read_maybe_gzip(labels_path), LABEL_MAGIC, "labels")
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise CountMismatch(
            f"{raw_images.shape[0]} images but {raw_labels.shape[0]} labels"
        )
    pixels = raw_images.astype(np.float64) / 255.0
    labels = raw_labels.astype(np.int64)
    if classes is not None:
        classes = sorted(int(c) for c in classes)
        keep = np.isin(labels, classes)
        pixels = pixels[keep]
        relabel = {c: i for i, c in enumerate(classes)}
        labels = np.array([relabel[int(v)] for v in labels[keep]], dtype=np.int64)
    return ImageBatch(pixels), labels


def write_idx(images_path, labels_path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write [0, 1] grayscale images and labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 4 and pixels.shape[3] == 1:
        pixels = pixels[..., 0]
    n, h, w = pixels.shape
    labels = np.asarray(labels)
    if labels.shape[0] != n:
        raise CountMismatch(f"{n} images but {labels.shape[0]} labels")
    data = np.round(pixels * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(IMAGE_MAGIC.to_bytes(4, "big"))
        for d in (n, h, w):
            f.write(int(d).to_bytes(4, "big"))
        f.write(data.tobytes())
    with open(labels_path, "wb") as f:
        f.write(LABEL_MAGIC.to_bytes(4, "big"))
        f.write(int(n).to_bytes(4, "big"))
        f.write(labels.astype(np.uint8).tobytes())


CIFAR_RECORD = 3073
CIFAR_SIDE = 32


def load_cifar10(batch_files):
    """(ImageBatch, labels) from CIFAR-10 binary batch files.

    Each record is 1 label byte plus 3 channel planes of 1024 row-major
    pixel bytes; planes are rearranged to (H, W, C).
    """
    all_pixels = []
    all_labels = []
    for path in batch_files:
        data = Path(path).read_bytes()
        if len(data) == 0 or len(data) % CIFAR_RECORD != 0:
            raise TruncatedFile(
                f"{path}: {len(data)} bytes is not a whole number of "
                f"{CIFAR_RECORD}-byte records"
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        labels = records[:, 0].astype(np.int64)
        if labels.max(initial=0) > 9:
            raise BadLabel(f"{path}: label {labels.max()} > 9")
        planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
        all_pixels.append(np.transpose(planes, (0, 2, 3, 1)).astype(np.float64) / 255.0)
        all_labels.append(labels)
    return ImageBatch(np.concatenate(all_pixels)), np.concatenate(all_labels)


def apply_normalization(images: ImageBatch, record: dict) -> ImageBatch:
    """Apply a stored normalization record to a batch."""
    if record.get("mode", "none") == "none":
        return images
    return ImageBatch((images.pixels - record["mean"]) / record["scale"])


def normalize(dataset: Dataset, mode: str) -> Dataset:
    """Standardize both splits with scalar mean/sd computed on train only."""
    if mode not in NORMALIZE_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    if mode == "none":
        record = {"mode": "none"}
        return Dataset(
            dataset.train_images,
            dataset.train_labels,
            dataset.test_images,
            dataset.test_labels,
            dataset.num_classes,
            normalization=record,
            metadata=dataset.metadata,
        )
    if dataset.train_images.n == 0:
        raise ZeroVariance("cannot normalize an empty training split")
    mean = float(dataset.train_images.pixels.mean())
    scale = float(dataset.train_images.pixels.std())
    if scale == 0.0:
        raise ZeroVariance("training pixels are constant")
    record = {"mode": "global-mean-scale", "mean": mean, "scale": scale}
    return Dataset(
        apply_normalization(dataset.train_images, record),
        dataset.train_labels,
        apply_normalization(dataset.test_images, record),
        dataset.test_labels,
        dataset.num_classes,
        normalization=record,
        metadata=dataset.metadata,
    )
