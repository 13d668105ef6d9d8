"""Datasets, deterministic class ordering, and protocol expansion.

Synthetic classes are low-frequency cosine patterns (one prototype per class,
per channel) with per-sample Gaussian noise scaled by `difficulty`; at
difficulty 0 every sample of a class is the prototype itself. The on-disk
format ("CILD") round-trips bit-exactly and all parse failures carry byte
offsets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .memory import BudgetPolicy
from .rng import SplitMix64

DATASET_MAGIC = b"CILD"
DATASET_VERSION = 1
NOISE_BASE_STD = 0.25
_PROTO_MODES = 4          # cosine modes per axis in a prototype


@dataclass(frozen=True)
class ProtocolConfig:
    """A CIL protocol: N1 initial classes, fixed-size increments, one budget."""

    total_classes: int
    initial_classes: int
    increment: int
    budget: BudgetPolicy
    epochs_initial: int = 20
    epochs_step: int = 5
    shuffle_seed: int = 1993

    def __post_init__(self):
        if self.initial_classes < 1 or self.increment < 1:
            raise ConfigError("initial_classes and increment must be >= 1")
        if self.initial_classes > self.total_classes:
            raise ConfigError(
                f"initial_classes {self.initial_classes} exceeds total "
                f"{self.total_classes}")
        if (self.total_classes - self.initial_classes) % self.increment != 0:
            raise ConfigError(
                f"(total_classes - initial_classes) = "
                f"{self.total_classes - self.initial_classes} not divisible by "
                f"increment {self.increment}")

    @property
    def num_steps(self) -> int:
        return 1 + (self.total_classes - self.initial_classes) // self.increment


@dataclass
class StepPlan:
    """Protocol expanded over the shuffled class order."""

    class_order: np.ndarray            # permutation of range(total_classes)
    steps: list[list[int]]             # original class ids per step

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.steps]

    @property
    def seen_counts(self) -> list[int]:
        return np.cumsum(self.sizes).tolist()


def shuffle_classes(total_classes: int, seed: int) -> np.ndarray:
    """Fisher-Yates permutation driven by SplitMix64(seed)."""
    if total_classes < 1:
        raise ConfigError("total_classes must be >= 1")
    return SplitMix64(seed).permutation(total_classes)


def build_protocol(cfg: ProtocolConfig) -> StepPlan:
    order = shuffle_classes(cfg.total_classes, cfg.shuffle_seed)
    steps = [order[:cfg.initial_classes].tolist()]
    pos = cfg.initial_classes
    while pos < cfg.total_classes:
        steps.append(order[pos:pos + cfg.increment].tolist())
        pos += cfg.increment
    return StepPlan(class_order=order, steps=steps)


@dataclass
class LabeledDataset:
    images: np.ndarray                 # [n, c, h, w] uint8
    labels: np.ndarray                 # [n] int64
    train_indices: np.ndarray
    test_indices: np.ndarray
    num_classes: int
    _by_class: dict = field(default_factory=dict, repr=False)

    def class_indices(self, split: str, class_id: int) -> np.ndarray:
        key = (split, class_id)
        if key not in self._by_class:
            pool = self.train_indices if split == "train" else self.test_indices
            self._by_class[key] = pool[self.labels[pool] == class_id]
        return self._by_class[key]

    def subset(self, split: str, class_ids) -> tuple[np.ndarray, np.ndarray]:
        """Images and labels of the given classes in one split."""
        idx = np.concatenate([self.class_indices(split, c) for c in class_ids])
        return self.images[idx], self.labels[idx]


def _prototype(stream: SplitMix64, channels: int, size: int) -> np.ndarray:
    """Smooth per-channel pattern from random low-order cosine coefficients."""
    coords = (np.arange(size) + 0.5) / size
    basis = np.stack([np.cos(np.pi * k * coords) for k in range(_PROTO_MODES)])
    coeff = stream.normals((channels, _PROTO_MODES, _PROTO_MODES))
    pattern = np.einsum("ckl,ki,lj->cij", coeff, basis, basis)
    lo = pattern.min(axis=(1, 2), keepdims=True)
    hi = pattern.max(axis=(1, 2), keepdims=True)
    return 0.2 + 0.6 * (pattern - lo) / np.maximum(hi - lo, 1e-9)


def generate_synthetic(num_classes: int, per_class_train: int,
                       per_class_test: int, image_size: int = 16,
                       channels: int = 3, difficulty: float = 0.5,
                       seed: int = 7) -> LabeledDataset:
    """Deterministic toy dataset: class prototypes plus scaled noise."""
    if min(num_classes, per_class_train, per_class_test, image_size) < 1:
        raise ConfigError("all synthetic dataset counts must be >= 1")
    root = SplitMix64(seed)
    proto_stream = root.child("prototypes")
    noise_stream = root.child("noise")
    per_class = per_class_train + per_class_test
    n = num_classes * per_class
    images = np.empty((n, channels, image_size, image_size), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    train_idx, test_idx = [], []
    pos = 0
    for cid in range(num_classes):
        proto = _prototype(proto_stream, channels, image_size)
        noise = noise_stream.normals((per_class, channels, image_size, image_size),
                                     std=NOISE_BASE_STD * difficulty)
        samples = np.clip(proto[None] + noise, 0.0, 1.0)
        images[pos:pos + per_class] = np.round(samples * 255.0).astype(np.uint8)
        labels[pos:pos + per_class] = cid
        train_idx.extend(range(pos, pos + per_class_train))
        test_idx.extend(range(pos + per_class_train, pos + per_class))
        pos += per_class
    return LabeledDataset(images=images, labels=labels,
                          train_indices=np.array(train_idx, dtype=np.int64),
                          test_indices=np.array(test_idx, dtype=np.int64),
                          num_classes=num_classes)


# ---------------------------------------------------------------------------
# CILD on-disk format: header, (label u16, pixels) records, index block

def save_dataset(ds: LabeledDataset, path) -> None:
    n, c, h, w = ds.images.shape
    chunks = [DATASET_MAGIC, struct.pack("<H", DATASET_VERSION),
              struct.pack("<IHHHH", n, h, w, c, ds.num_classes)]
    for i in range(n):
        chunks.append(struct.pack("<H", int(ds.labels[i])))
        chunks.append(np.ascontiguousarray(ds.images[i], dtype=np.uint8).tobytes())
    chunks.append(struct.pack("<I", len(ds.train_indices)))
    chunks.append(ds.train_indices.astype("<u4").tobytes())
    chunks.append(struct.pack("<I", len(ds.test_indices)))
    chunks.append(ds.test_indices.astype("<u4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def read(fmt, context=""):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise DataFormatError(
                f"dataset truncated at byte {off}{context}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    if blob[:4] != DATASET_MAGIC:
        raise DataFormatError(f"bad magic in {path}: not a CILD dataset")
    off = 4
    (version,) = read("<H")
    if version != DATASET_VERSION:
        raise DataFormatError(f"unsupported dataset version {version}")
    n, h, w, c, num_classes = read("<IHHHH")
    pixels = c * h * w
    images = np.empty((n, c, h, w), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        (label,) = read("<H", context=f" (in record {i})")
        if label >= num_classes:
            raise DataFormatError(
                f"label {label} out of range [0, {num_classes}) in record {i} "
                f"at byte {off - 2}")
        if off + pixels > len(blob):
            raise DataFormatError(
                f"dataset truncated at byte {off} (in record {i})")
        images[i] = np.frombuffer(blob, dtype=np.uint8, count=pixels,
                                  offset=off).reshape(c, h, w)
        labels[i] = label
        off += pixels

    def read_index(name):
        (count,) = read("<I", context=f" (in {name} index block)")
        if off + 4 * count > len(blob):
            raise DataFormatError(
                f"dataset truncated at byte {off} (in {name} index block)")
        idx = np.frombuffer(blob, dtype="<u4", count=count, offset=off).astype(np.int64)
        if count and idx.max() >= n:
            raise DataFormatError(
                f"{name} index {int(idx.max())} out of range [0, {n})")
        return idx, 4 * count

    train_idx, consumed = read_index("train")
    off += consumed
    test_idx, consumed = read_index("test")
    off += consumed
    overlap = np.intersect1d(train_idx, test_idx)
    if len(overlap):
        raise DataFormatError(
            f"train/test split overlaps at image index {int(overlap[0])}")
    if len(train_idx) + len(test_idx) != n:
        raise DataFormatError(
            f"split covers {len(train_idx) + len(test_idx)} of {n} records")
    return LabeledDataset(images=images, labels=labels,
                          train_indices=train_idx, test_indices=test_idx,
                          num_classes=num_classes)
