"""Datasets: IDX and CIFAR-10 binary readers/writers, plus the desk digit set."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, InvalidArgumentError, InvalidShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InvalidShapeError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise InvalidShapeError("images and labels differ in length")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise InvalidArgumentError("pixel values must lie in [0,1]")

    def __len__(self):
        return len(self.labels)

    @property
    def input_shape(self):
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx])


# ---------------------------------------------------------------------------
# IDX (MNIST layout)
# ---------------------------------------------------------------------------
def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return path.read_bytes()


def read_idx_images(path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 16:
        raise CorruptFileError(f"{path}: truncated IDX header")
    magic, n, h, w = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise CorruptFileError(f"{path}: bad IDX image magic {magic:#010x}")
    if len(buf) != 16 + n * h * w:
        raise CorruptFileError(f"{path}: expected {n * h * w} pixels, found {len(buf) - 16}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, 1, h, w)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    if len(buf) < 8:
        raise CorruptFileError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABELS_MAGIC:
        raise CorruptFileError(f"{path}: bad IDX label magic {magic:#010x}")
    if len(buf) != 8 + n:
        raise CorruptFileError(f"{path}: expected {n} labels, found {len(buf) - 8}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def write_idx(images_u8, labels, images_path, labels_path):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    if images_u8.ndim == 4:
        if images_u8.shape[1] != 1:
            raise InvalidShapeError("IDX stores single-channel images only")
        images_u8 = images_u8[:, 0]
    n, h, w = images_u8.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images_u8.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_idx(directory, split="train") -> Dataset:
    img_name, lbl_name = IDX_NAMES[split]
    directory = Path(directory)
    images = read_idx_images(directory / img_name)
    labels = read_idx_labels(directory / lbl_name)
    if len(images) != len(labels):
        raise CorruptFileError(f"{directory}: {len(images)} images but {len(labels)} labels")
    return Dataset(images.astype(np.float32) / 255.0, labels)


# ---------------------------------------------------------------------------
# CIFAR-10 binary
# ---------------------------------------------------------------------------
def read_cifar_batch(path) -> Dataset:
    buf = _read_bytes(path)
    if len(buf) % CIFAR_RECORD:
        raise CorruptFileError(f"{path}: size {len(buf)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise CorruptFileError(f"{path}: label out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels)


def write_cifar_batch(images_u8, labels, path):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    if images_u8.shape[1:] != (3, 32, 32):
        raise InvalidShapeError(f"CIFAR records hold 3x32x32 images, got {images_u8.shape[1:]}")
    rec = np.concatenate(
        [np.asarray(labels, dtype=np.uint8)[:, None], images_u8.reshape(len(images_u8), -1)], axis=1
    )
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def load_cifar(directory, split="train") -> Dataset:
    directory = Path(directory)
    names = sorted(directory.glob("data_batch_*.bin")) if split == "train" else [directory / "test_batch.bin"]
    if not names:
        raise FileNotFoundError(f"no CIFAR batches under {directory}")
    parts = [read_cifar_batch(p) for p in names]
    return Dataset(
        np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts])
    )


def load_dataset(path, fmt="idx", split="train") -> Dataset:
    if not os.path.isdir(path):
        raise FileNotFoundError(f"dataset directory not found: {path}")
    if fmt == "idx":
        return load_idx(path, split)
    if fmt == "cifar":
        return load_cifar(path, split)
    raise InvalidArgumentError(f"unknown dataset format {fmt!r}")


# ---------------------------------------------------------------------------
# desk digits: sklearn's 8x8 digits placed MNIST-style in a 28x28 frame
# ---------------------------------------------------------------------------
def desk_digits(test_fraction=0.2, seed=0):
    """Return ``(train, test)`` 1x28x28 digit datasets.

    The 8x8 scans are bilinearly upsampled to 20x20 and centred with a 4-pixel
    border, as in MNIST.  The split is a seeded permutation.
    """
    from sklearn.datasets import load_digits

    from .tensor import bilinear_resize, no_grad

    raw = load_digits()
    small = (raw.images / 16.0).astype(np.float64)[:, None]
    with no_grad():
        big = bilinear_resize(small, (20, 20)).data
    images = np.zeros((len(small), 1, 28, 28), dtype=np.float64)
    images[:, :, 4:24, 4:24] = big
    # quantize so the set round-trips through 8-bit IDX files exactly
    images = np.round(np.clip(images, 0, 1) * 255) / 255
    labels = raw.target.astype(np.int64)
    perm = np.random.default_rng(seed).permutation(len(labels))
    n_test = int(round(len(labels) * test_fraction))
    test, train = perm[:n_test], perm[n_test:]
    return Dataset(images[train], labels[train]), Dataset(images[test], labels[test])


def write_idx_dataset(ds: Dataset, directory, split="train"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_name, lbl_name = IDX_NAMES[split]
    u8 = np.round(ds.images * 255).astype(np.uint8)
    write_idx(u8, ds.labels, directory / img_name, directory / lbl_name)
