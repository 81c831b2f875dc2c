"""IDX image/label ingestion, pixel normalization, and synthetic fixtures.

Images are stored as float64 in [-0.5, 0.5] (byte value p maps to
p/255 - 0.5). IDX files may be raw or gzip-compressed; compression is
sniffed from the leading two bytes, not the file name.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedError, ValidationError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
_GZIP_PREFIX = b"\x1f\x8b"

__all__ = [
    "Dataset",
    "load_idx_images",
    "load_idx_labels",
    "save_idx_images",
    "save_idx_labels",
    "normalize",
    "mnist_dataset",
    "synthetic_blobs",
]


def _read_payload(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == _GZIP_PREFIX:
        return gzip.decompress(raw)
    return raw


def _check_magic(path, buf: bytes, expected: int, kind: str) -> None:
    if len(buf) < 4:
        raise TruncatedError(f"{path}: file shorter than a magic number")
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected:
        raise BadMagicError(
            f"{path}: magic 0x{magic:08x}, expected {kind} magic 0x{expected:08x}"
        )


def load_idx_images(path) -> np.ndarray:
    """Parse an IDX image file into a uint8 array of shape (N, H, W)."""
    buf = _read_payload(path)
    _check_magic(path, buf, IMAGES_MAGIC, "image")
    if len(buf) < 16:
        raise TruncatedError(f"{path}: header needs 16 bytes, file has {len(buf)}")
    n, h, w = struct.unpack(">III", buf[4:16])
    expected = 16 + n * h * w
    if len(buf) != expected:
        raise TruncatedError(f"{path}: payload is {len(buf)} bytes, expected {expected}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, h, w).copy()


def load_idx_labels(path) -> np.ndarray:
    """Parse an IDX label file into an int64 array of shape (N,)."""
    buf = _read_payload(path)
    _check_magic(path, buf, LABELS_MAGIC, "label")
    if len(buf) < 8:
        raise TruncatedError(f"{path}: header needs 8 bytes, file has {len(buf)}")
    n = struct.unpack(">I", buf[4:8])[0]
    if len(buf) != 8 + n:
        raise TruncatedError(f"{path}: payload is {len(buf)} bytes, expected {8 + n}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def _write(path, payload: bytes) -> None:
    path = Path(path)
    if path.suffix == ".gz":
        # mtime pinned so re-serialization is byte-deterministic
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def save_idx_images(path, images: np.ndarray) -> None:
    """Serialize a uint8 (N, H, W) array as an IDX image file."""
    arr = np.asarray(images)
    if arr.ndim != 3 or arr.dtype != np.uint8:
        raise ValidationError(f"expected uint8 (N, H, W), got {arr.dtype} {arr.shape}")
    header = struct.pack(">IIII", IMAGES_MAGIC, *arr.shape)
    _write(path, header + arr.tobytes())


def save_idx_labels(path, labels: np.ndarray) -> None:
    """Serialize an integer (N,) array as an IDX label file."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ValidationError(f"expected 1-D labels, got shape {arr.shape}")
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValidationError("labels must fit in a byte")
    header = struct.pack(">II", LABELS_MAGIC, arr.shape[0])
    _write(path, header + arr.astype(np.uint8).tobytes())


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map byte values to float64 pixels: p -> p/255 - 0.5."""
    arr = np.asarray(raw)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValidationError("raw pixel values must lie in [0, 255]")
    return arr.astype(np.float64) / 255.0 - 0.5


@dataclass
class Dataset:
    """Normalized images plus integer labels for one split.

    ``images`` has shape (N, 1, H, W) with every pixel in [-0.5, 0.5];
    ``labels`` holds N class ids in [0, 10). Instances are treated as
    immutable after construction.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise ValidationError(f"images must be (N, 1, H, W), got {self.images.shape}")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ValidationError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels"
            )
        if self.images.size and (self.images.min() < -0.5 or self.images.max() > 0.5):
            raise ValidationError("pixels must lie within [-0.5, 0.5]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= 10):
            raise ValidationError("class ids must lie in [0, 10)")

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, n: int) -> "Dataset":
        """Deterministic prefix of the first n examples."""
        if not 0 < n <= len(self):
            raise ValidationError(f"cannot take {n} of {len(self)} examples")
        return Dataset(self.images[:n], self.labels[:n], self.split)

    def take_per_class(self, n_per_class: int) -> "Dataset":
        """First n examples of every class, in original order."""
        keep = []
        for cls in np.unique(self.labels):
            idx = np.flatnonzero(self.labels == cls)
            if idx.size < n_per_class:
                raise ValidationError(
                    f"class {cls} has only {idx.size} examples, need {n_per_class}"
                )
            keep.append(idx[:n_per_class])
        order = np.sort(np.concatenate(keep))
        return Dataset(self.images[order], self.labels[order], self.split)

    def shuffled(self, seed: int) -> "Dataset":
        perm = np.random.default_rng(seed).permutation(len(self))
        return Dataset(self.images[perm], self.labels[perm], self.split)


_MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def mnist_dataset(data_dir, split: str = "train") -> Dataset:
    """Load an MNIST-layout split from a directory of IDX files.

    Accepts both raw and .gz files; Fashion-MNIST ships in the identical
    layout, so pointing ``data_dir`` at its files works unchanged.
    """
    if split not in _MNIST_FILES:
        raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
    image_name, label_name = _MNIST_FILES[split]
    data_dir = Path(data_dir)

    def locate(name: str) -> Path:
        for candidate in (data_dir / name, data_dir / (name + ".gz")):
            if candidate.exists():
                return candidate
        raise FileNotFoundError(f"missing {name}[.gz] under {data_dir}")

    images = normalize(load_idx_images(locate(image_name)))[:, None, :, :]
    labels = load_idx_labels(locate(label_name))
    return Dataset(images, labels, split)


def synthetic_blobs(n_per_class: int, classes: int = 3, seed: int = 0) -> Dataset:
    """Class-conditional Gaussian bumps rendered as 28x28 images.

    Each class owns a fixed center on a ring; samples jitter the center
    and amplitude slightly. Distinct active-pixel regions make the
    classes linearly separable by construction. Deterministic per seed.
    """
    if n_per_class < 1:
        raise ValidationError("n_per_class must be at least 1")
    if not 1 <= classes <= 10:
        raise ValidationError("classes must lie in [1, 10]")
    rng = np.random.default_rng(seed)
    side = 28
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    images = np.empty((classes * n_per_class, 1, side, side))
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    for cls in range(classes):
        angle = 2.0 * np.pi * cls / max(classes, 2)
        cx = 14.0 + 8.0 * np.cos(angle)
        cy = 14.0 + 8.0 * np.sin(angle)
        for i in range(n_per_class):
            row = cls * n_per_class + i
            jx = cx + rng.normal(0.0, 0.6)
            jy = cy + rng.normal(0.0, 0.6)
            amplitude = rng.uniform(0.85, 1.0)
            bump = amplitude * np.exp(-((xx - jx) ** 2 + (yy - jy) ** 2) / (2.0 * 2.2**2))
            noise = rng.normal(0.0, 0.01, (side, side))
            images[row, 0] = np.clip(bump - 0.5 + noise, -0.5, 0.5)
            labels[row] = cls
    return Dataset(images, labels, "train")
