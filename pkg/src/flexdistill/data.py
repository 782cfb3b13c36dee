"""Datasets: IDX/CSV loaders, synthetic generators, splits and batching.

IDX files are big-endian: a 4-byte magic (``0x00000803`` for a uint8 image
tensor N x H x W, ``0x00000801`` for a uint8 label vector N), one uint32 per
dimension, then the raw bytes. Images load as float64 in [0, 1] with shape
``(N, 1, H, W)``.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, ValidationError
from .tensor import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    norm: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.labels.size
        if n < 1:
            raise ValidationError("dataset is empty")
        if self.inputs.shape[0] != n:
            raise ValidationError(f"{self.inputs.shape[0]} inputs but {n} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), found {self.labels.min()}..{self.labels.max()}")
        if not np.all(np.isfinite(self.inputs)):
            raise ValidationError("inputs contain non-finite values")

    def __len__(self):
        return int(self.labels.size)

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes, self.norm)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()


def _read_idx(path, expect_magic, what):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: bad {what} magic 0x{magic:08x}, expected 0x{expect_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != header + count:
        raise FormatError(f"{path}: expected {count} data bytes, found {len(raw) - header}",
                          offset=min(len(raw), header + count))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "image")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "label").astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise ValidationError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels, num_classes)


def write_idx(images, labels, images_path, labels_path):
    """Write uint8 images ``(N, H, W)`` and labels ``(N,)`` as an IDX pair."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValidationError(f"write_idx: bad shapes {images.shape} / {labels.shape}")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.astype(np.uint8).tobytes())


def load_csv(path, label_column: str = "label", num_classes: int | None = None) -> Dataset:
    """Numeric CSV with a header row; every column but ``label_column`` is a feature."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file", offset="line 1") from None
        if label_column not in header:
            raise FormatError(f"{path}: no column named {label_column!r}", offset="line 1")
        li = header.index(label_column)
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}: expected {len(header)} fields, got {len(row)}", offset=f"line {lineno}")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise FormatError(f"{path}: non-numeric cell", offset=f"line {lineno}") from None
            lab = values.pop(li)
            if lab != int(lab):
                raise FormatError(f"{path}: label {lab} is not an integer", offset=f"line {lineno}")
            rows.append(values)
            labels.append(int(lab))
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    labels = np.array(labels)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    return Dataset(np.array(rows), labels, num_classes)


def make_synthetic(kind="spirals", n_per_class=100, classes=3, noise=0.1, seed=0, turns=1.25) -> Dataset:
    """Seeded 2-D point clouds.

    ``blobs``: isotropic Gaussians (std ``noise``) around centers evenly
    spaced on a circle of radius 3. ``spirals``: one Archimedean arm per
    class, arms rotated by 2*pi/classes, radius in [0.2, 1], ``turns`` turns, with
    Gaussian angular noise of std ``noise`` radians.
    """
    if n_per_class < 1 or classes < 2:
        raise ParameterError(f"need n_per_class >= 1 and classes >= 2, got {n_per_class}, {classes}")
    if noise < 0:
        raise ParameterError(f"noise must be >= 0, got {noise}")
    rng = Rng(seed)
    xs, ys = [], []
    for c in range(classes):
        if kind == "blobs":
            phi = 2 * np.pi * c / classes
            center = 3.0 * np.array([np.cos(phi), np.sin(phi)])
            pts = center + noise * rng.gen.standard_normal((n_per_class, 2)) if noise else np.tile(center, (n_per_class, 1))
        elif kind == "spirals":
            t = np.linspace(0.0, 1.0, n_per_class)
            r = 0.2 + 0.8 * t
            theta = 2 * np.pi * (turns * t + c / classes)
            if noise:
                theta = theta + noise * rng.gen.standard_normal(n_per_class)
            pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        else:
            raise ParameterError(f"unknown synthetic kind {kind!r}")
        xs.append(pts)
        ys.append(np.full(n_per_class, c))
    return Dataset(np.concatenate(xs), np.concatenate(ys), classes)


def make_digit_images(n_train=3400, n_val=600, seed=0):
    """Reduced 8x8 handwritten-digit image set as uint8 arrays.

    Source images are the scikit-learn digits (1797 samples, 10 classes).
    They are split into disjoint train/val source pools first, then each pool
    is resampled up to the requested size with +-1 pixel shifts and light
    pixel noise, so no source image contributes to both splits.
    Returns ``(train_images, train_labels, val_images, val_labels)``.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = digits.images / 16.0
    labels = digits.target
    rng = Rng(seed)
    order = rng.gen.permutation(len(labels))
    n_src_val = max(1, round(len(labels) * n_val / (n_train + n_val)))
    pools = order[n_src_val:], order[:n_src_val]

    def expand(pool, n):
        pick = np.concatenate([pool, rng.gen.choice(pool, size=max(0, n - len(pool)))])[:n]
        out = np.empty((n, 8, 8))
        for k, src in enumerate(pick):
            img = np.pad(images[src], 1)
            dy, dx = rng.gen.integers(0, 3, size=2)
            out[k] = img[dy:dy + 8, dx:dx + 8]
        out += 0.05 * rng.gen.standard_normal(out.shape)
        return np.clip(np.rint(out * 255), 0, 255).astype(np.uint8), labels[pick].astype(np.uint8)

    tr_x, tr_y = expand(pools[0], n_train)
    va_x, va_y = expand(pools[1], n_val)
    return tr_x, tr_y, va_x, va_y


def split(dataset: Dataset, val_fraction: float, seed: int = 0):
    """Seeded random partition into ``(train, val)``."""
    if not 0 < val_fraction < 1:
        raise ParameterError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val >= n:
        raise ParameterError(f"val_fraction {val_fraction} leaves an empty split for N={n}")
    perm = Rng(seed).gen.permutation(n)
    return dataset.subset(np.sort(perm[n_val:])), dataset.subset(np.sort(perm[:n_val]))


def fit_normalizer(dataset: Dataset):
    """Per-feature (mean, std) of the dataset; zero std is replaced by 1."""
    mean = dataset.inputs.mean(axis=0)
    std = dataset.inputs.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def normalize(dataset: Dataset, stats) -> Dataset:
    mean, std = stats
    return Dataset((dataset.inputs - mean) / std, dataset.labels, dataset.num_classes, stats)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    """The shuffle for ``epoch``: PCG64 seeded with ``[seed, epoch]``."""
    return np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)


def batches(n: int, batch_size: int, seed: int, epoch: int, drop_last=False, min_batch=1):
    """Index arrays covering a seeded permutation of ``range(n)``.

    A trailing batch smaller than ``min_batch`` is merged into the previous
    batch (or dropped with ``drop_last``), so every sample is still visited
    exactly once per epoch when ``drop_last`` is false.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    perm = epoch_permutation(n, seed, epoch)
    out = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    if out and len(out[-1]) < batch_size:
        if drop_last:
            out.pop()
        elif len(out[-1]) < min_batch and len(out) > 1:
            tail = out.pop()
            out[-1] = np.concatenate([out[-1], tail])
    return out



def write_digit_idx(directory, n_train=3400, n_val=600, seed=0, prefix="digits"):
    """Write the reduced digit image set as two IDX pairs; returns the four paths."""
    import os

    os.makedirs(directory, exist_ok=True)
    tr_x, tr_y, va_x, va_y = make_digit_images(n_train, n_val, seed)
    paths = [os.path.join(directory, f"{prefix}-{split}-{kind}.idx")
             for split in ("train", "val") for kind in ("images", "labels")]
    write_idx(tr_x, tr_y, paths[0], paths[1])
    write_idx(va_x, va_y, paths[2], paths[3])
    return paths
