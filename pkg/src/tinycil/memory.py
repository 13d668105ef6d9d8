"""Exemplar storage under replay budgets, with greedy mean-matching herding.

Herding keeps the running mean of the selected features as close as possible
to the class mean, one greedy pick at a time; the resulting order is what the
store keeps, so trimming to a smaller budget always removes a suffix and the
selection for budget k is a prefix of the selection for budget k' > k.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataFormatError

STORE_MAGIC = b"CILX"
STORE_VERSION = 1


@dataclass(frozen=True)
class PerClass:
    """Fixed number of exemplars per old class (R_per)."""

    per_class: int


@dataclass(frozen=True)
class Total:
    """Fixed total replay budget shared by all seen classes (R_total)."""

    total: int


BudgetPolicy = PerClass | Total


def per_class_budget(policy: BudgetPolicy, n_seen: int) -> int:
    """Exemplars each class may keep once n_seen classes have arrived."""
    if n_seen < 1:
        raise ConfigError(f"n_seen must be >= 1, got {n_seen}")
    if isinstance(policy, PerClass):
        return policy.per_class
    return policy.total // n_seen      # remainder is discarded, never spread


def herding_select(features: np.ndarray, budget: int) -> list[int]:
    """Greedy mean-matching order over L2-normalized feature rows.

    At pick k the index minimizing ||mu - (sum_selected + f_i) / k|| is taken,
    ties broken by lowest index. Returns the first `budget` picks (all, in
    herding order, when budget >= the candidate count).
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ConfigError(f"herding_select needs a non-empty [n, d] matrix, got {f.shape}")
    if budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    n = f.shape[0]
    mu = f.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros(f.shape[1])
    remaining = np.arange(n)
    for k in range(1, min(budget, n) + 1):
        cand = (running + f[remaining]) / k
        d2 = ((cand - mu) ** 2).sum(axis=1)
        pick = int(np.argmin(d2))      # first minimum -> lowest index on ties
        idx = int(remaining[pick])
        chosen.append(idx)
        running += f[idx]
        remaining = np.delete(remaining, pick)
    return chosen


class ExemplarStore:
    """Per-class exemplar image lists in herding order, under one budget policy."""

    def __init__(self, policy: BudgetPolicy):
        self.policy = policy
        self._images: dict[int, np.ndarray] = {}

    def class_ids(self) -> list[int]:
        return list(self._images)

    def count(self, class_id: int) -> int:
        return len(self._images[class_id])

    def counts(self) -> dict[int, int]:
        return {cid: len(imgs) for cid, imgs in self._images.items()}

    def total_count(self) -> int:
        return sum(len(imgs) for imgs in self._images.values())

    def images(self, class_id: int) -> np.ndarray:
        return self._images[class_id]

    def add_and_trim(self, new_class_exemplars: dict[int, np.ndarray],
                     n_seen: int) -> None:
        """Insert herded lists for new classes, then trim every class's tail."""
        for cid in new_class_exemplars:
            if cid in self._images:
                raise ConfigError(f"class {cid} already stored")
        for cid, imgs in new_class_exemplars.items():
            self._images[cid] = np.asarray(imgs)
        budget = per_class_budget(self.policy, n_seen)
        for cid, imgs in self._images.items():
            if len(imgs) > budget:
                self._images[cid] = imgs[:budget]

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored exemplars as (images, labels) in class insertion order."""
        if not self._images:
            raise ConfigError("exemplar store is empty")
        images = np.concatenate(list(self._images.values()), axis=0)
        labels = np.concatenate([np.full(len(imgs), cid, dtype=np.int64)
                                 for cid, imgs in self._images.items()])
        return images, labels


def save_store(store: ExemplarStore, path) -> None:
    """Serialize with the dataset record layout: (label u16, raw u8 pixels)."""
    ids = store.class_ids()
    if ids:
        c, h, w = store.images(ids[0]).shape[1:]
    else:
        c = h = w = 0
    if isinstance(store.policy, PerClass):
        policy_kind, amount = 0, store.policy.per_class
    else:
        policy_kind, amount = 1, store.policy.total
    chunks = [STORE_MAGIC, struct.pack("<H", STORE_VERSION),
              struct.pack("<BI", policy_kind, amount),
              struct.pack("<HHH", h, w, c),
              struct.pack("<I", len(ids))]
    for cid in ids:
        imgs = store.images(cid)
        chunks.append(struct.pack("<HI", cid, len(imgs)))
        for img in imgs:
            chunks.append(struct.pack("<H", cid))
            chunks.append(np.ascontiguousarray(img, dtype=np.uint8).tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def load_store(path) -> ExemplarStore:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def read(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise DataFormatError(f"store file truncated at byte {off}")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    if blob[:4] != STORE_MAGIC:
        raise DataFormatError(f"bad magic in {path}: not an exemplar store")
    off = 4
    (version,) = read("<H")
    if version != STORE_VERSION:
        raise DataFormatError(f"unsupported store version {version}")
    policy_kind, amount = read("<BI")
    policy: BudgetPolicy = PerClass(amount) if policy_kind == 0 else Total(amount)
    h, w, c = read("<HHH")
    (n_classes,) = read("<I")
    store = ExemplarStore(policy)
    pixels = c * h * w
    for _ in range(n_classes):
        cid, count = read("<HI")
        imgs = np.empty((count, c, h, w), dtype=np.uint8)
        for i in range(count):
            (label,) = read("<H")
            if label != cid:
                raise DataFormatError(
                    f"store record label {label} != class {cid} at byte {off}")
            if off + pixels > len(blob):
                raise DataFormatError(
                    f"store file truncated in class {cid} record {i} at byte {off}")
            imgs[i] = np.frombuffer(blob, dtype=np.uint8, count=pixels,
                                    offset=off).reshape(c, h, w)
            off += pixels
        store._images[cid] = imgs
    return store
