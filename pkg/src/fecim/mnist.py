"""MNIST IDX-format loader.

Reads the original big-endian IDX files (magic 2051 for images, 2049 for
labels), plain or gzip-compressed, and returns pixel arrays scaled to
[0, 1].
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049

_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class MnistFormatError(ValueError):
    """Bad magic, truncated payload, or image/label count mismatch."""


@dataclass
class Dataset:
    """images: (N, 28, 28) float32 in [0,1]; labels: (N,) uint8 0-9."""

    images: np.ndarray
    labels: np.ndarray
    split: str

    def __len__(self):
        return len(self.labels)

    @property
    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)


def _open_maybe_gz(path: str):
    if os.path.exists(path):
        return open(path, "rb")
    if os.path.exists(path + ".gz"):
        return gzip.open(path + ".gz", "rb")
    raise FileNotFoundError(f"{path}[.gz] not found")


def load_idx_images(path: str) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise MnistFormatError("truncated image header")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGE_MAGIC:
            raise MnistFormatError(f"bad image magic {magic} (expected {IMAGE_MAGIC})")
        payload = fh.read(count * rows * cols)
    if len(payload) != count * rows * cols:
        raise MnistFormatError("truncated image payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path: str) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise MnistFormatError("truncated label header")
        magic, count = struct.unpack(">II", header)
        if magic != LABEL_MAGIC:
            raise MnistFormatError(f"bad label magic {magic} (expected {LABEL_MAGIC})")
        payload = fh.read(count)
    if len(payload) != count:
        raise MnistFormatError("truncated label payload")
    return np.frombuffer(payload, dtype=np.uint8)


def load_mnist(root: str, split: str = "test") -> Dataset:
    """Load one MNIST split from a directory of IDX files."""
    if split not in _FILES:
        raise ValueError(f"split must be one of {sorted(_FILES)}")
    img_name, lab_name = _FILES[split]
    images = load_idx_images(os.path.join(root, img_name))
    labels = load_idx_labels(os.path.join(root, lab_name))
    if len(images) != len(labels):
        raise MnistFormatError(
            f"image/label count mismatch: {len(images)} vs {len(labels)}"
        )
    images = images.astype(np.float32) / 255.0
    return Dataset(images=images, labels=labels, split=split)


def default_data_dir() -> str:
    """MNIST directory: $FECIM_MNIST_DIR or ./data/mnist."""
    return os.environ.get("FECIM_MNIST_DIR", os.path.join("data", "mnist"))
