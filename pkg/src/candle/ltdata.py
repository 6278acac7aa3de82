"""Datasets, long-tail derivation, class-balanced sampling and class partitions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .errors import CorruptData, InvalidRatio, InvalidShape

CIFAR_VARIANTS = {
    # variant: (record bytes, label offset, num classes, train files, test files)
    "cifar10": (3073, 0, 10, [f"data_batch_{i}.bin" for i in range(1, 6)], ["test_batch.bin"]),
    "cifar100": (3074, 1, 100, ["train.bin"], ["test.bin"]),
}


@dataclass
class Dataset:
    """Labeled images (N,C,H,W) in [0,1].

    ``images`` may be None for label-only datasets, which is enough for
    count-level work such as deriving LT statistics.
    """

    images: np.ndarray | None
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images is not None and self.images.shape[0] != self.labels.shape[0]:
            raise InvalidShape(f"{self.images.shape[0]} images for {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidShape("label outside [0, num_classes)")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        images = None if self.images is None else self.images[indices]
        return Dataset(images, self.labels[indices], self.num_classes, self.name)


@dataclass
class LTDataset(Dataset):
    imbalance_ratio: float = 1.0
    class_order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    provenance: dict = field(default_factory=dict)
    source_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def ordered_counts(self) -> np.ndarray:
        return self.class_counts[self.class_order]

    def manifest(self) -> dict:
        return {
            "source": self.provenance.get("source", self.name),
            "ratio": self.imbalance_ratio,
            "seed": self.provenance.get("seed"),
            "class_order": [int(c) for c in self.class_order],
            "class_counts": [int(n) for n in self.class_counts],
            "ordered_counts": [int(n) for n in self.ordered_counts],
            "num_samples": len(self),
            "retained_indices": [int(i) for i in self.source_indices],
        }


# ---------------------------------------------------------------- CIFAR


def parse_cifar_records(data: bytes, variant: str, base_offset: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Parse raw CIFAR binary records into (uint8 pixels (N,3,32,32), labels)."""
    rec, label_at, k, _, _ = CIFAR_VARIANTS[variant]
    if not data:
        raise CorruptData("empty CIFAR file", base_offset)
    full = len(data) // rec
    if len(data) % rec:
        raise CorruptData(f"truncated {variant} record", base_offset + full * rec)
    arr = np.frombuffer(data, dtype=np.uint8).reshape(full, rec)
    labels = arr[:, label_at].astype(np.int64)
    bad = np.nonzero(labels >= k)[0]
    if bad.size:
        raise CorruptData(f"label {labels[bad[0]]} >= {k}", base_offset + int(bad[0]) * rec + label_at)
    pixels = arr[:, label_at + 1:].reshape(full, 3, 32, 32)
    return pixels, labels


def load_cifar_binary(path, variant: str = "cifar10", split: str = "train") -> Dataset:
    """Load CIFAR binary batches from a file or from the extracted batch directory."""
    if variant not in CIFAR_VARIANTS:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    _, _, k, train_files, test_files = CIFAR_VARIANTS[variant]
    path = Path(path)
    files = [path] if path.is_file() else [path / f for f in (train_files if split == "train" else test_files)]
    pixels, labels = [], []
    for f in files:
        px, lb = parse_cifar_records(f.read_bytes(), variant)
        pixels.append(px)
        labels.append(lb)
    images = np.concatenate(pixels).astype(np.float32) / np.float32(255.0)
    return Dataset(images, np.concatenate(labels), k, name=f"{variant}-{split}")


# ---------------------------------------------------------------- LT derivation


def class_order_by_count(counts) -> np.ndarray:
    """Class indices sorted by descending count, ties by ascending index."""
    counts = np.asarray(counts)
    return np.lexsort((np.arange(counts.size), -counts)).astype(np.int64)


def lt_counts(source_counts, ratio: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-class target sizes for an exponentially decaying long tail.

    Returns ``(class_order, counts_along_order)`` where position ``c`` gets
    ``floor(n_max * ratio ** (-c / (K - 1)))`` samples, capped by what the
    source class has.
    """
    if not ratio >= 1:
        raise InvalidRatio(f"imbalance ratio must be >= 1, got {ratio}")
    source_counts = np.asarray(source_counts, dtype=np.int64)
    order = class_order_by_count(source_counts)
    k = order.size
    if k == 1:
        return order, source_counts[order].copy()
    n_max = int(source_counts[order[0]])
    target = np.array([math.floor(n_max * ratio ** (-c / (k - 1))) for c in range(k)], dtype=np.int64)
    return order, np.minimum(target, source_counts[order])


def derive_lt(d: Dataset, ratio: float, seed: int = 0) -> LTDataset:
    order, counts = lt_counts(d.class_counts, ratio)
    rng = np.random.default_rng(seed)
    keep = []
    for cls, n in zip(order, counts):
        idx = np.nonzero(d.labels == cls)[0]
        keep.append(rng.permutation(idx)[:n])
    keep = np.sort(np.concatenate(keep)) if keep else np.zeros(0, dtype=np.int64)
    sub = d.subset(keep)
    return LTDataset(
        sub.images, sub.labels, d.num_classes, name=f"{d.name}-lt{ratio:g}",
        imbalance_ratio=float(ratio), class_order=order,
        provenance={"source": d.name, "seed": int(seed), "ratio": float(ratio)},
        source_indices=keep,
    )


def as_lt(d: Dataset) -> LTDataset:
    """View an arbitrary dataset as LT data ordered by its own class counts."""
    counts = d.class_counts
    ratio = float(counts.max() / max(counts[counts > 0].min(), 1)) if counts.any() else 1.0
    return LTDataset(d.images, d.labels, d.num_classes, d.name, imbalance_ratio=ratio,
                     class_order=class_order_by_count(counts), provenance={"source": d.name},
                     source_indices=np.arange(len(d)))


def save_dataset(path, d: Dataset):
    tensors = {"labels": d.labels.astype(np.float32),
               "num_classes": np.asarray(d.num_classes, dtype=np.float32)}
    if d.images is not None:
        tensors["images"] = d.images
    if isinstance(d, LTDataset):
        tensors["class_order"] = d.class_order.astype(np.float32)
        tensors["imbalance_ratio"] = np.asarray(d.imbalance_ratio, dtype=np.float32)
    checkpoint.save(path, tensors)


def load_dataset(path, name: str | None = None) -> Dataset:
    tensors, _ = checkpoint.load(path)
    labels = tensors["labels"].astype(np.int64)
    k = int(tensors["num_classes"].reshape(()))
    images = tensors.get("images")
    name = name or Path(path).stem
    if "class_order" in tensors:
        base = as_lt(Dataset(images, labels, k, name))
        base.class_order = tensors["class_order"].astype(np.int64)
        if "imbalance_ratio" in tensors:
            base.imbalance_ratio = float(tensors["imbalance_ratio"].reshape(()))
        return base
    return Dataset(images, labels, k, name)


def write_manifest(path, lt: LTDataset):
    Path(path).write_text(json.dumps(lt.manifest(), indent=2))


# ---------------------------------------------------------------- sampling and partitions


def class_balanced_indices(lt: Dataset, epoch_len: int, seed) -> np.ndarray:
    """Draw a class uniformly, then a sample of it uniformly, with replacement."""
    if epoch_len < 1:
        raise ValueError("epoch_len must be >= 1")
    rng = np.random.default_rng(seed)
    members = [np.nonzero(lt.labels == c)[0] for c in range(lt.num_classes)]
    present = [m for m in members if m.size]
    picks = rng.integers(len(present), size=epoch_len)
    within = rng.random(epoch_len)
    out = np.empty(epoch_len, dtype=np.int64)
    for j, m in enumerate(present):
        sel = picks == j
        out[sel] = m[(within[sel] * m.size).astype(np.int64)]
    return out


@dataclass(frozen=True)
class ClassPartition:
    head: tuple[int, ...]
    medium: tuple[int, ...]
    tail: tuple[int, ...]

    def group_of(self, cls: int) -> str:
        if cls in self.head:
            return "head"
        if cls in self.medium:
            return "medium"
        return "tail"

    def to_dict(self) -> dict:
        return {"head": list(self.head), "medium": list(self.medium), "tail": list(self.tail)}


def partition_classes(class_counts, order=None, scheme: str = "tertile",
                      many: int = 100, few: int = 20) -> ClassPartition:
    """Split classes into head/medium/tail groups.

    ``tertile`` takes contiguous thirds along the head-to-tail order
    (ceil(K/3) head, ceil(K/3) medium, rest tail). ``count`` uses absolute
    training counts: more than ``many`` is head, fewer than ``few`` is tail.
    """
    counts = np.asarray(class_counts)
    order = class_order_by_count(counts) if order is None else np.asarray(order)
    k = order.size
    if scheme == "tertile":
        third = -(-k // 3)
        head, medium, tail = order[:third], order[third:2 * third], order[2 * third:]
    elif scheme == "count":
        head = [c for c in order if counts[c] > many]
        tail = [c for c in order if counts[c] < few]
        medium = [c for c in order if few <= counts[c] <= many]
    else:
        raise ValueError(f"unknown partition scheme {scheme!r}")
    return ClassPartition(tuple(int(c) for c in head), tuple(int(c) for c in medium),
                          tuple(int(c) for c in tail))


# ---------------------------------------------------------------- synthetic data


def _class_templates(k: int, size: int, channels: int, rng, blobs: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((k, channels, size, size))
    for c in range(k):
        for _ in range(blobs):
            cy, cx = rng.uniform(0.15, 0.85, size=2) * size
            width = rng.uniform(0.08, 0.2) * size
            amp = rng.normal(size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            out[c] += amp[:, None, None] * bump
        out[c] -= out[c].mean()
    # orthonormal templates: every class mean is equally far from every other
    flat = out.reshape(k, -1)
    if flat.shape[1] < k:
        raise ValueError(f"{k} classes need at least {k} pixels per image")
    q, r = np.linalg.qr(flat.T)
    q *= np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.T.reshape(out.shape)


def synth_generate(k: int, per_class_max: int, image_size: int = 32, class_separation: float = 5.0,
                   seed: int = 0, split: str = "train", noise: float = 0.1, channels: int = 3,
                   jitter: int = 0, per_class=None) -> Dataset:
    """Gaussian-blob class templates plus i.i.d. pixel noise.

    Each class mean is ``0.5 + s * noise * u_c`` where the ``u_c`` are orthonormal
    smooth patterns, so ``class_separation`` is each class mean's offset from the
    grand mean in units of the noise standard deviation (pairwise distance ``sqrt(2) s``). Templates depend on ``seed`` only; ``split``
    selects an independent noise stream, so train and test share classes.
    ``jitter`` applies a random circular shift of up to that many pixels.
    """
    if k < 2:
        raise ValueError("synthetic data needs at least two classes")
    templates = _class_templates(k, image_size, channels, np.random.default_rng([seed, 0]))
    split_key = int.from_bytes(split.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    rng = np.random.default_rng([seed, 1, split_key])
    counts = np.full(k, per_class_max) if per_class is None else np.asarray(per_class)
    labels = np.repeat(np.arange(k), counts)
    n = labels.size
    x = 0.5 + class_separation * noise * templates[labels]
    if jitter:
        shifts = rng.integers(-jitter, jitter + 1, size=(n, 2))
        for i in range(n):
            x[i] = np.roll(x[i], tuple(shifts[i]), axis=(1, 2))
    x += rng.normal(scale=noise, size=x.shape)
    images = np.clip(x, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, k, name=f"synth{k}-{split}")
