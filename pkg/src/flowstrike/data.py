"""Datasets: CIFAR-10 binary ingestion, the synthetic shape set, splits, and
storage of (clean, adversarial) training pairs."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Prng
from .tff import FormatError, read_tensor, write_tensor, _read_exact

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixel bytes
PAIRS_MAGIC = b"PRS1"
LINF_SLACK = 1e-6


@dataclass
class Example:
    """One image in [0,1]^{C,H,W} with its integer class label."""

    image: np.ndarray
    label: int


class Dataset:
    """Stacked images [N,C,H,W] in [0,1] with labels [N]."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, num_classes: int):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or labels.shape != (images.shape[0],):
            raise ValueError(f"images {images.shape} vs labels {labels.shape}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values outside [0,1]")
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError("label outside [0, num_classes)")
        self.images = images
        self.labels = labels
        self.num_classes = num_classes

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(self.images[i], int(self.labels[i]))

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


def load_cifar_batch(path) -> Dataset:
    """Parse one CIFAR-10 binary batch (3073-byte records, RGB planes)."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"file length {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise FormatError(f"label byte {labels.max()} > 9")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes=10)


def encode_cifar_records(dataset: Dataset) -> bytes:
    """Inverse of load_cifar_batch for images that are exact multiples of 1/255."""
    out = io.BytesIO()
    for i in range(len(dataset)):
        out.write(struct.pack("B", int(dataset.labels[i])))
        pixels = np.round(dataset.images[i] * 255.0).astype(np.uint8)
        out.write(pixels.tobytes())
    return out.getvalue()


# ---- synthetic shape dataset ---------------------------------------------------

NOISE_AMPLITUDE = 0.05
PATTERN_NAMES = [
    "filled_square",
    "filled_circle",
    "plus_cross",
    "diagonal_cross",
    "horizontal_stripes",
    "vertical_stripes",
    "diagonal_stripes",
    "ring",
    "square_frame",
    "checkerboard",
]


def _pattern_mask(kind: int, size: int, prng: Prng) -> np.ndarray:
    """Boolean foreground mask for one class pattern, geometry jittered."""
    g = prng.generator
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size / 2 + g.uniform(-size / 8, size / 8)
    cx = size / 2 + g.uniform(-size / 8, size / 8)
    if kind == 0:  # filled square
        half = size * g.uniform(0.18, 0.30)
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if kind == 1:  # filled circle
        r = size * g.uniform(0.18, 0.30)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 2:  # plus cross
        half = size * g.uniform(0.25, 0.40)
        thick = max(1.0, size * g.uniform(0.06, 0.11))
        arm = (np.abs(yy - cy) <= thick) & (np.abs(xx - cx) <= half)
        return arm | ((np.abs(xx - cx) <= thick) & (np.abs(yy - cy) <= half))
    if kind == 3:  # diagonal cross
        half = size * g.uniform(0.25, 0.40)
        thick = max(1.0, size * g.uniform(0.07, 0.12))
        box = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        d1 = np.abs((yy - cy) - (xx - cx)) <= thick
        d2 = np.abs((yy - cy) + (xx - cx)) <= thick
        return box & (d1 | d2)
    if kind in (4, 5, 6):  # stripes
        period = size * g.uniform(0.22, 0.34)
        phase = g.uniform(0, period)
        if kind == 4:
            coord = yy
        elif kind == 5:
            coord = xx
        else:
            coord = (yy + xx) / np.sqrt(2.0)
        return ((coord + phase) % period) < period / 2
    if kind == 7:  # ring
        r = size * g.uniform(0.22, 0.32)
        thick = max(1.0, size * g.uniform(0.07, 0.12))
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        return np.abs(dist - r) <= thick
    if kind == 8:  # square frame
        half = size * g.uniform(0.24, 0.34)
        thick = max(1.0, size * g.uniform(0.08, 0.13))
        outer = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        inner = (np.abs(yy - cy) <= half - thick) & (np.abs(xx - cx) <= half - thick)
        return outer & ~inner
    if kind == 9:  # checkerboard
        cell = size * g.uniform(0.20, 0.30)
        py = g.uniform(0, cell)
        px = g.uniform(0, cell)
        return (((yy + py) // cell) + ((xx + px) // cell)) % 2 == 0
    raise ValueError(f"unknown pattern kind {kind}")


def gen_synthetic(num_classes: int, size: int, count: int, seed: Prng | int) -> Dataset:
    """Class-conditional geometric patterns with jitter and additive noise.

    Classes are balanced; same seed gives the identical dataset.
    """
    if size not in (16, 32):
        raise ValueError(f"size must be 16 or 32, got {size}")
    if not 1 <= num_classes <= 10:
        raise ValueError(f"num_classes must be in [1,10], got {num_classes}")
    prng = seed if isinstance(seed, Prng) else Prng(seed)
    g = prng.generator
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.empty(count, dtype=np.int64)
    for i in range(count):
        cls = i % num_classes
        mask = _pattern_mask(cls, size, prng)
        fg = g.uniform(0.55, 0.95, size=3)
        bg = g.uniform(0.05, 0.45, size=3)
        img = np.where(mask[None, :, :], fg[:, None, None], bg[:, None, None])
        img = img + g.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = cls
    order = prng.permutation(count)
    return Dataset(images[order], labels[order], num_classes)


def split(dataset: Dataset, train_fraction: float, seed: Prng | int):
    """Disjoint, exhaustive, seed-deterministic shuffled partition."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction {train_fraction} outside (0,1)")
    prng = seed if isinstance(seed, Prng) else Prng(seed)
    order = prng.permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


# ---- clean/adversarial pair storage ---------------------------------------------


class PairSet:
    """Aligned clean and adversarial images with the L-inf budget they obey."""

    def __init__(
        self,
        clean: np.ndarray,
        adversarial: np.ndarray,
        labels: np.ndarray,
        epsilon: float,
    ):
        clean = np.asarray(clean, dtype=np.float32)
        adversarial = np.asarray(adversarial, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if clean.shape != adversarial.shape or labels.shape != (clean.shape[0],):
            raise ValueError("clean/adversarial/label shapes disagree")
        self.clean = clean
        self.adversarial = adversarial
        self.labels = labels
        self.epsilon = float(epsilon)
        self.check_invariants()

    def __len__(self) -> int:
        return self.clean.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.clean.shape[1:])

    def check_invariants(self) -> None:
        if len(self) == 0:
            return
        gap = np.abs(self.adversarial - self.clean).max()
        if gap > self.epsilon + LINF_SLACK:
            raise ValueError(
                f"L-inf perturbation {gap:.6f} exceeds epsilon {self.epsilon:.6f}"
            )
        for name, arr in (("clean", self.clean), ("adversarial", self.adversarial)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError(f"{name} pixels outside [0,1]")

    @classmethod
    def empty(cls, image_shape: tuple[int, int, int], epsilon: float) -> "PairSet":
        shape = (0,) + tuple(image_shape)
        return cls(
            np.empty(shape, np.float32),
            np.empty(shape, np.float32),
            np.empty(0, np.int64),
            epsilon,
        )


def save_pairs(pairs: PairSet, path) -> None:
    buf = io.BytesIO()
    buf.write(PAIRS_MAGIC)
    buf.write(struct.pack("<I", len(pairs)))
    buf.write(struct.pack("<f", pairs.epsilon))
    c, h, w = pairs.image_shape if len(pairs) else (0, 0, 0)
    buf.write(struct.pack("<III", c, h, w))
    for i in range(len(pairs)):
        buf.write(struct.pack("<I", int(pairs.labels[i])))
        write_tensor(buf, pairs.clean[i])
        write_tensor(buf, pairs.adversarial[i])
    Path(path).write_bytes(buf.getvalue())


def load_pairs(path) -> PairSet:
    """Read a pair file; re-validates the L-inf and range invariants."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != PAIRS_MAGIC:
            raise FormatError(f"bad pairs magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        (epsilon,) = struct.unpack("<f", _read_exact(fh, 4))
        c, h, w = struct.unpack("<III", _read_exact(fh, 12))
        clean = np.empty((count, c, h, w), np.float32)
        adv = np.empty((count, c, h, w), np.float32)
        labels = np.empty(count, np.int64)
        for i in range(count):
            (labels[i],) = struct.unpack("<I", _read_exact(fh, 4))
            clean[i] = read_tensor(fh)
            adv[i] = read_tensor(fh)
    return PairSet(clean, adv, labels, epsilon)
