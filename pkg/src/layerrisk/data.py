"""MNIST IDX and CIFAR binary loaders, writers for the same formats, batching.

Pixels are scaled to [0, 1] by dividing by 255. Loaders accept either the
plain files or their ``.gz`` variants.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError
from .tensor import SeededRng

IDX_IMAGES_MAGIC = 0x00000803  # 2051
IDX_LABELS_MAGIC = 0x00000801  # 2049
CIFAR_PIXELS = 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR10_FILES = {
    "train": [f"data_batch_{i}.bin" for i in range(1, 6)],
    "test": ["test_batch.bin"],
}
CIFAR100_FILES = {"train": ["train.bin"], "test": ["test.bin"]}
CIFAR_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray      # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray      # (N,) int64
    split: str
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def _read_bytes(path: Path) -> bytes:
    if path.exists():
        return path.read_bytes()
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.decompress(gz.read_bytes())
    raise FormatError(f"missing dataset file {path} (or {gz.name})")


def parse_idx_images(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Decode an IDX3 image file into a uint8 array of shape (N, rows, cols)."""
    if len(buf) < 16:
        raise FormatError(f"{source}: truncated IDX header at offset {len(buf)}")
    magic, n, rows, cols = struct.unpack_from(">IIII", buf, 0)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{source}: bad IDX image magic 0x{magic:08x} at offset 0")
    expected = 16 + n * rows * cols
    if len(buf) != expected:
        raise FormatError(f"{source}: expected {expected} bytes, file ends at offset {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, rows, cols)


def parse_idx_labels(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"{source}: truncated IDX header at offset {len(buf)}")
    magic, n = struct.unpack_from(">II", buf, 0)
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{source}: bad IDX label magic 0x{magic:08x} at offset 0")
    if len(buf) != 8 + n:
        raise FormatError(f"{source}: expected {8 + n} bytes, file ends at offset {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=8)


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes()


def _to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


def _limit(arr: np.ndarray, limit: int | None) -> np.ndarray:
    return arr if limit is None else arr[:limit]


def load_mnist(directory, limit_train: int | None = None, limit_test: int | None = None):
    """Return ``(train, test)`` datasets with images of shape (N, 1, 28, 28)."""
    directory = Path(directory)
    out = []
    for split, limit in (("train", limit_train), ("test", limit_test)):
        img_name, lab_name = MNIST_FILES[split]
        images = parse_idx_images(_read_bytes(directory / img_name), str(directory / img_name))
        labels = parse_idx_labels(_read_bytes(directory / lab_name), str(directory / lab_name))
        if len(images) != len(labels):
            raise FormatError(f"{directory}: {split} has {len(images)} images but {len(labels)} labels")
        images, labels = _limit(images, limit), _limit(labels, limit)
        out.append(Dataset(_to_unit(images)[:, None], labels.astype(np.int64), split, 10))
    return tuple(out)


def write_mnist(directory, train: tuple[np.ndarray, np.ndarray], test: tuple[np.ndarray, np.ndarray]) -> None:
    """Write uint8 ``(images, labels)`` pairs as uncompressed IDX files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, (images, labels) in (("train", train), ("test", test)):
        img_name, lab_name = MNIST_FILES[split]
        (directory / img_name).write_bytes(encode_idx_images(images))
        (directory / lab_name).write_bytes(encode_idx_labels(labels))


def parse_cifar(buf: bytes, variant: str, source: str = "<bytes>"):
    """Decode CIFAR binary records into (uint8 images (N,3,32,32), labels)."""
    label_bytes = {"cifar10": 1, "cifar100": 2}[variant]
    record = label_bytes + CIFAR_PIXELS
    if len(buf) % record:
        raise FormatError(f"{source}: length {len(buf)} is not a multiple of the "
                          f"{record}-byte {variant} record; partial record at offset "
                          f"{len(buf) - len(buf) % record}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, record)
    labels = raw[:, label_bytes - 1]  # cifar100: byte 0 coarse, byte 1 fine
    images = raw[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def encode_cifar(images: np.ndarray, labels, variant: str, coarse_labels=None) -> bytes:
    images = np.asarray(images, dtype=np.uint8).reshape(-1, CIFAR_PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    cols = [labels, images]
    if variant == "cifar100":
        coarse = np.zeros_like(labels) if coarse_labels is None else \
            np.asarray(coarse_labels, dtype=np.uint8).reshape(-1, 1)
        cols = [coarse, labels, images]
    return np.concatenate(cols, axis=1).tobytes()


def _cifar_dir(directory: Path, variant: str) -> Path:
    sub = directory / CIFAR_SUBDIRS[variant]
    return sub if sub.is_dir() else directory


def load_cifar(directory, variant: str, limit_train: int | None = None, limit_test: int | None = None):
    """Return ``(train, test)`` for the binary CIFAR-10 / CIFAR-100 distributions."""
    if variant not in CIFAR_SUBDIRS:
        raise ConfigError(f"unknown CIFAR variant {variant!r}")
    directory = _cifar_dir(Path(directory), variant)
    files = CIFAR10_FILES if variant == "cifar10" else CIFAR100_FILES
    num_classes = 10 if variant == "cifar10" else 100
    out = []
    for split, limit in (("train", limit_train), ("test", limit_test)):
        chunks_x, chunks_y = [], []
        remaining = limit
        for fname in files[split]:
            if remaining is not None and remaining <= 0:
                break
            images, labels = parse_cifar(_read_bytes(directory / fname), variant, str(directory / fname))
            chunks_x.append(_limit(images, remaining))
            chunks_y.append(_limit(labels, remaining))
            if remaining is not None:
                remaining -= len(chunks_y[-1])
        images = np.concatenate(chunks_x) if chunks_x else np.zeros((0, 3, 32, 32), np.uint8)
        labels = np.concatenate(chunks_y) if chunks_y else np.zeros(0, np.uint8)
        if labels.size and labels.max() >= num_classes:
            raise FormatError(f"{directory}: label {labels.max()} out of range for {variant}")
        out.append(Dataset(_to_unit(images), labels.astype(np.int64), split, num_classes))
    return tuple(out)


def write_cifar(directory, variant: str, train, test) -> None:
    """Write uint8 ``(images, labels)`` pairs in the CIFAR binary layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if variant == "cifar10":
        x, y = np.asarray(train[0]), np.asarray(train[1])
        for i, part in enumerate(np.array_split(np.arange(len(y)), 5), start=1):
            (directory / f"data_batch_{i}.bin").write_bytes(encode_cifar(x[part], y[part], variant))
        (directory / "test_batch.bin").write_bytes(encode_cifar(*test, variant))
    else:
        (directory / "train.bin").write_bytes(encode_cifar(*train, variant))
        (directory / "test.bin").write_bytes(encode_cifar(*test, variant))


def load_dataset(name: str, directory, limit_train=None, limit_test=None):
    if name == "mnist":
        return load_mnist(directory, limit_train, limit_test)
    if name in CIFAR_SUBDIRS:
        return load_cifar(directory, name, limit_train, limit_test)
    raise ConfigError(f"unknown dataset {name!r}")


# ---------------------------------------------------------------- synthetic data

def make_synthetic_lowrank(n: int, ambient_dim: int, true_rank: int, noise_sigma: float,
                           seed: int) -> np.ndarray:
    """Columns ``U z + sigma * noise`` with ``U`` an orthonormal ambient x rank basis."""
    if true_rank > ambient_dim:
        raise ContractError(f"true_rank {true_rank} exceeds ambient_dim {ambient_dim}")
    if n <= true_rank or true_rank < 1:
        raise ContractError(f"need n > true_rank >= 1, got n={n}, rank={true_rank}")
    gen = SeededRng(seed).child("synthetic-lowrank").generator()
    basis, _ = np.linalg.qr(gen.standard_normal((ambient_dim, true_rank)))
    z = gen.standard_normal((true_rank, n))
    noise = gen.standard_normal((ambient_dim, n))
    return basis @ z + noise_sigma * noise


# ---------------------------------------------------------------- batching

@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    order: np.ndarray
    epoch_seed: int

    @classmethod
    def shuffled(cls, n: int, batch_size: int, epoch_seed: int) -> "BatchPlan":
        if not 1 <= batch_size <= n:
            raise ContractError(f"batch size {batch_size} must lie in [1, {n}]")
        order = SeededRng(epoch_seed).child("batch-order").generator().permutation(n)
        return cls(batch_size, order, epoch_seed)

    def __len__(self) -> int:
        return len(self.order) // self.batch_size

    def index_batches(self):
        m = self.batch_size
        for b in range(len(self)):
            yield self.order[b * m:(b + 1) * m]


def batches(ds: Dataset, plan: BatchPlan):
    """Yield ``(images, labels)`` per full batch; the final partial batch is dropped."""
    for idx in plan.index_batches():
        yield ds.images[idx], ds.labels[idx]
