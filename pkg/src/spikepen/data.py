"""Dataset ingestion: IDX (Fashion-MNIST style) and CIFAR binary formats.

Loads produce images scaled to [0, 1] in NCHW layout, deterministic seeded
train/validation splits, per-channel standardization computed from the train
split, and the crop/flip augmentation used at train time.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FormatError, ParameterError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FASHION_MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}

# (train, validation, test) sizes after splitting the official train set
FASHION_MNIST_SPLIT = (54000, 6000, 10000)
CIFAR_SPLIT = (45000, 5000, 10000)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str

    def __len__(self):
        return self.images.shape[0]


@dataclass
class ChannelStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)


def _open_maybe_gzip(path: str):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _resolve(directory: str, name: str) -> str:
    for candidate in (name, name + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FormatError(f"missing dataset file {name}[.gz] in {directory}")


def read_idx(path: str) -> np.ndarray:
    """Parse one big-endian IDX file (raw or gzipped) into a numpy array."""
    with _open_maybe_gzip(path) as f:
        header = f.read(4)
        if len(header) < 4:
            raise FormatError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", header)
        if magic == IDX_IMAGES_MAGIC:
            dims = struct.unpack(">III", f.read(12))
        elif magic == IDX_LABELS_MAGIC:
            dims = struct.unpack(">I", f.read(4))
        else:
            raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
        count = int(np.prod(dims))
        raw = f.read(count)
        if len(raw) != count:
            raise FormatError(f"{path}: truncated IDX payload ({len(raw)} of {count} bytes)")
        return np.frombuffer(raw, dtype=np.uint8).reshape(dims)


def _split_train(images, labels, n_train, n_val, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(images.shape[0])
    tr, va = perm[:n_train], perm[n_train : n_train + n_val]
    return (
        Dataset(images[tr], labels[tr], "train"),
        Dataset(images[va], labels[va], "val"),
    )


def load_fashion_mnist(directory: str, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Load the four IDX files and split train into 54000/6000 deterministically."""
    imgs = read_idx(_resolve(directory, FASHION_MNIST_FILES["train_images"]))
    labels = read_idx(_resolve(directory, FASHION_MNIST_FILES["train_labels"]))
    test_imgs = read_idx(_resolve(directory, FASHION_MNIST_FILES["test_images"]))
    test_labels = read_idx(_resolve(directory, FASHION_MNIST_FILES["test_labels"]))
    if imgs.ndim != 3 or imgs.shape[0] != labels.shape[0]:
        raise FormatError(f"image/label counts disagree: {imgs.shape} vs {labels.shape}")
    x = (imgs.astype(np.float32) / 255.0)[:, None, :, :]
    xt = (test_imgs.astype(np.float32) / 255.0)[:, None, :, :]
    n_train, n_val, _ = FASHION_MNIST_SPLIT
    if imgs.shape[0] < n_train + n_val:
        n_train = int(imgs.shape[0] * n_train / (n_train + n_val))
        n_val = imgs.shape[0] - n_train
    train, val = _split_train(x, labels.astype(np.int64), n_train, n_val, seed)
    test = Dataset(xt, test_labels.astype(np.int64), "test")
    return train, val, test


def _read_cifar_file(path: str, classes: int) -> tuple[np.ndarray, np.ndarray]:
    record = 3073 if classes == 10 else 3074
    with _open_maybe_gzip(path) as f:
        raw = f.read()
    if len(raw) % record != 0:
        raise FormatError(f"{path}: size {len(raw)} is not a multiple of record length {record}")
    n = len(raw) // record
    data = np.frombuffer(raw, dtype=np.uint8).reshape(n, record)
    labels = data[:, record - 3073].astype(np.int64)  # fine label (last label byte)
    if labels.max(initial=0) >= classes:
        raise FormatError(f"{path}: label {labels.max()} out of range for {classes} classes")
    images = data[:, record - 3072 :].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar(directory: str, classes: int = 10, seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Load CIFAR-10/100 binary batches and split train into 45000/5000."""
    if classes == 10:
        train_files = [f"data_batch_{i}.bin" for i in range(1, 6)]
        test_files = ["test_batch.bin"]
    elif classes == 100:
        train_files = ["train.bin"]
        test_files = ["test.bin"]
    else:
        raise ParameterError(f"classes must be 10 or 100, got {classes}")
    xs, ys = [], []
    for name in train_files:
        x, y = _read_cifar_file(_resolve(directory, name), classes)
        xs.append(x)
        ys.append(y)
    images = np.concatenate(xs)
    labels = np.concatenate(ys)
    xt, yt = _read_cifar_file(_resolve(directory, test_files[0]), classes)
    n_train, n_val, _ = CIFAR_SPLIT
    if images.shape[0] < n_train + n_val:
        n_train = int(images.shape[0] * n_train / (n_train + n_val))
        n_val = images.shape[0] - n_train
    train, val = _split_train(images, labels, n_train, n_val, seed)
    return train, val, Dataset(xt, yt, "test")


def channel_stats(train: Dataset) -> ChannelStats:
    """Per-channel mean and std over the train split (std floored at tiny)."""
    mean = train.images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = train.images.std(axis=(0, 2, 3), dtype=np.float64)
    std = np.where(std > 0, std, 1.0)
    return ChannelStats(mean.astype(np.float32), std.astype(np.float32))


def encode(images: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Direct encoding: standardized real pixels feed the first layer as-is."""
    shape = (1, -1, 1, 1)
    return (images - stats.mean.reshape(shape)) / stats.std.reshape(shape)


def augment_batch(
    images: np.ndarray,
    rng: np.random.Generator,
    mode: str = "train",
    flip: bool = False,
    pad: int = 4,
) -> np.ndarray:
    """Random crop from a zero-padded canvas, plus optional horizontal flip.

    Eval mode returns the input unchanged. Shapes are preserved.
    """
    if mode == "eval":
        return images
    b, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(b, 2))
    for i in range(b):
        oy, ox = offsets[i]
        out[i] = padded[i, :, oy : oy + h, ox : ox + w]
    if flip:
        do_flip = rng.random(b) < 0.5
        out[do_flip] = out[do_flip, :, :, ::-1]
    return out


def subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    """Deterministic random subset of n samples."""
    if n > len(ds):
        raise DataError(f"requested {n} samples from a split of {len(ds)}")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return Dataset(ds.images[idx], ds.labels[idx], ds.split)
