"""Dataset ingestion: IDX-format image files and synthetic blobs."""

from __future__ import annotations

import dataclasses
import gzip
import struct
from pathlib import Path

import numpy as np

from .numkit import RngStream

__all__ = ["Dataset", "IdxFormatError", "load_mnist_idx", "synth_dataset"]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file failed validation; the message carries the byte offset."""


@dataclasses.dataclass
class Dataset:
    """Flat feature vectors in [0, 1] with integer class labels."""

    inputs: np.ndarray  # (n, dim) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self) -> None:
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("inputs must be (n, dim), labels (n,)")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels"
            )
        if self.labels.size and not (
            0 <= self.labels.min() and self.labels.max() < self.num_classes
        ):
            raise ValueError("labels out of range for num_classes")

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def dim(self) -> int:
        return int(self.inputs.shape[1])

    def take(self, count: int) -> "Dataset":
        return Dataset(self.inputs[:count], self.labels[:count], self.num_classes)

    def split(self, valid_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Deterministic shuffle-split into (train, valid)."""
        perm = RngStream(seed, (0xDA7A,)).generator().permutation(self.n)
        n_valid = int(round(self.n * valid_fraction))
        valid_idx, train_idx = perm[:n_valid], perm[n_valid:]
        return (
            Dataset(self.inputs[train_idx], self.labels[train_idx], self.num_classes),
            Dataset(self.inputs[valid_idx], self.labels[valid_idx], self.num_classes),
        )


def _read_bytes(path: str | Path) -> bytes:
    p = Path(path)
    if p.suffix == ".gz":
        with gzip.open(p, "rb") as f:
            return f.read()
    return p.read_bytes()


def _read_header(raw: bytes, path: str | Path, magic: int, n_dims: int) -> tuple[int, ...]:
    header_len = 4 * (1 + n_dims)
    if len(raw) < header_len:
        raise IdxFormatError(
            f"{path}: truncated header, file ends at byte {len(raw)} "
            f"(need {header_len})"
        )
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxFormatError(
            f"{path}: bad magic 0x{got:08x} at byte 0 (expected 0x{magic:08x})"
        )
    return struct.unpack(f">{n_dims}I", raw[4:header_len])


def load_mnist_idx(images_path: str | Path, labels_path: str | Path) -> Dataset:
    """Load an IDX image/label file pair into flat [0,1] vectors.

    Accepts plain or .gz files. Images use magic 0x00000803 with big-endian
    (count, rows, cols); labels use 0x00000801 with (count,); pixel bytes
    are scaled by 1/255.
    """
    img_raw = _read_bytes(images_path)
    n, rows, cols = _read_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    expected = 16 + n * rows * cols
    if len(img_raw) != expected:
        raise IdxFormatError(
            f"{images_path}: expected {expected} bytes for {n} images of "
            f"{rows}x{cols}, file ends at byte {len(img_raw)}"
        )
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    inputs = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0

    lbl_raw = _read_bytes(labels_path)
    (n_labels,) = _read_header(lbl_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lbl_raw) != 8 + n_labels:
        raise IdxFormatError(
            f"{labels_path}: expected {8 + n_labels} bytes for {n_labels} "
            f"labels, file ends at byte {len(lbl_raw)}"
        )
    if n_labels != n:
        raise IdxFormatError(
            f"image count {n} != label count {n_labels} "
            f"({images_path} vs {labels_path})"
        )
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(inputs=inputs, labels=labels, num_classes=10)


def synth_dataset(
    seed: int, n: int, dim: int, classes: int, separation: float
) -> Dataset:
    """Gaussian blobs per class, min-max rescaled into [0, 1].

    Class means sit on a sphere of radius `separation` around the origin;
    separation 0 makes inputs label-independent, large separation makes the
    classes linearly separable. Deterministic under the seed.
    """
    if n < 1 or dim < 1 or classes < 1:
        raise ValueError("n, dim and classes must all be >= 1")
    gen = RngStream(seed, (0x5B10B5,)).generator()
    directions = gen.standard_normal((classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = separation * directions
    labels = gen.permutation(np.arange(n) % classes)
    inputs = means[labels] + gen.standard_normal((n, dim))
    lo, hi = inputs.min(), inputs.max()
    if hi > lo:
        inputs = (inputs - lo) / (hi - lo)
    else:
        inputs = np.zeros_like(inputs)
    return Dataset(inputs=inputs, labels=labels.astype(np.int64), num_classes=classes)
