"""Evaluation reports, classifier norm profiles, per-class gains and step-cost profiling."""

from __future__ import annotations

import csv
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingTensor, ShapeMismatch
from .ltdata import ClassPartition, Dataset


@dataclass
class EvalReport:
    per_class_acc: np.ndarray
    class_counts: np.ndarray
    confusion: np.ndarray
    partition: ClassPartition
    excluded: list[int] = field(default_factory=list)

    def _group_acc(self, classes) -> float:
        classes = [c for c in classes if c not in self.excluded]
        n = self.class_counts[classes].sum() if classes else 0
        if n == 0:
            return float("nan")
        return float((self.per_class_acc[classes] * self.class_counts[classes]).sum() / n)

    @property
    def mean_acc(self) -> float:
        return self._group_acc(range(self.per_class_acc.size))

    @property
    def head_acc(self) -> float:
        return self._group_acc(self.partition.head)

    @property
    def medium_acc(self) -> float:
        return self._group_acc(self.partition.medium)

    @property
    def tail_acc(self) -> float:
        return self._group_acc(self.partition.tail)

    def to_dict(self) -> dict:
        return {
            "mean_acc": self.mean_acc,
            "head_acc": self.head_acc,
            "medium_acc": self.medium_acc,
            "tail_acc": self.tail_acc,
            "per_class_acc": [float(a) for a in self.per_class_acc],
            "class_counts": [int(n) for n in self.class_counts],
            "confusion": self.confusion.astype(int).tolist(),
            "partition": self.partition.to_dict(),
            "excluded_classes": list(self.excluded),
        }


def report_from_predictions(pred, labels, num_classes: int, partition: ClassPartition) -> EvalReport:
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    counts = confusion.sum(axis=1)
    correct = np.diag(confusion)
    acc = np.where(counts > 0, 100.0 * correct / np.maximum(counts, 1), 0.0)
    excluded = [int(c) for c in np.nonzero(counts == 0)[0]]
    return EvalReport(acc, counts, confusion, partition, excluded)


def evaluate(model, test: Dataset, partition: ClassPartition, batch_size: int = 256) -> EvalReport:
    logits = model.predict_logits(test.images, batch_size=batch_size)
    return report_from_predictions(logits.argmax(axis=1), test.labels, test.num_classes, partition)


@dataclass
class GainReport:
    per_class: np.ndarray
    head: float
    medium: float
    tail: float
    mean: float

    def to_dict(self) -> dict:
        return {"per_class": [float(g) for g in self.per_class], "head": self.head,
                "medium": self.medium, "tail": self.tail, "mean": self.mean}


def gain_report(candle: EvalReport, baseline: EvalReport) -> GainReport:
    if candle.per_class_acc.shape != baseline.per_class_acc.shape:
        raise ShapeMismatch("reports cover different numbers of classes")
    return GainReport(
        candle.per_class_acc - baseline.per_class_acc,
        candle.head_acc - baseline.head_acc,
        candle.medium_acc - baseline.medium_acc,
        candle.tail_acc - baseline.tail_acc,
        candle.mean_acc - baseline.mean_acc,
    )


@dataclass
class NormProfile:
    class_order: np.ndarray
    norms: np.ndarray
    biases: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.norms.mean())

    @property
    def std(self) -> float:
        return float(self.norms.std())

    @property
    def cv(self) -> float:
        m = self.mean
        return self.std / m if m > 0 else 0.0

    @property
    def slope(self) -> float:
        k = self.norms.size
        if k < 2:
            return 0.0
        rank = np.arange(k, dtype=np.float64)
        rc = rank - rank.mean()
        return float((rc * (self.norms - self.norms.mean())).sum() / (rc * rc).sum())

    def summary(self) -> dict:
        return {"mean": self.mean, "std": self.std, "cv": self.cv, "slope": self.slope}


def classifier_norms(tensors: dict, class_order=None, weight_key: str = "classifier.weight",
                     bias_key: str = "classifier.bias") -> NormProfile:
    """Per-class L2 norms of the classifier rows, listed head to tail."""
    if weight_key not in tensors:
        raise MissingTensor(weight_key)
    w = np.asarray(tensors[weight_key], dtype=np.float64)
    k = w.shape[0]
    order = np.arange(k) if class_order is None else np.asarray(class_order, dtype=np.int64)
    if order.size != k:
        raise ShapeMismatch(f"class order has {order.size} entries for {k} classifier rows")
    norms = np.sqrt((w * w).sum(axis=1))[order]
    bias = np.asarray(tensors.get(bias_key, np.zeros(k)), dtype=np.float64)[order]
    return NormProfile(order, norms, bias)


PER_CLASS_COLUMNS = ["class_rank", "class_id", "count", "accuracy", "weight_norm", "bias"]


def write_per_class_csv(path, report: EvalReport, class_order, train_counts=None,
                        norms: NormProfile | None = None):
    class_order = np.asarray(class_order)
    norm_of = {}
    if norms is not None:
        norm_of = {int(c): (float(n), float(b)) for c, n, b in zip(norms.class_order, norms.norms, norms.biases)}
    counts = report.class_counts if train_counts is None else np.asarray(train_counts)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(PER_CLASS_COLUMNS)
        for rank, c in enumerate(class_order):
            c = int(c)
            wn, b = norm_of.get(c, ("", ""))
            out.writerow([rank, c, int(counts[c]), float(report.per_class_acc[c]), wn, b])


def write_norms_csv(path, profile: NormProfile):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["class_rank", "class_id", "weight_norm", "bias"])
        for rank, (c, n, b) in enumerate(zip(profile.class_order, profile.norms, profile.biases)):
            out.writerow([rank, int(c), float(n), float(b)])


# ---------------------------------------------------------------- profiling


PROFILE_VARIANTS = ("single-res", "multi-res-teacher", "direct-multi-res")


def profile_step_costs(cfg, lt, teacher_factory, variants=PROFILE_VARIANTS, warmup=None,
                       steps=None, memory_steps: int = 3) -> list[dict]:
    """Time distillation steps for each multi-resolution variant on identical batches.

    ``teacher_factory(multi_res)`` returns a calibrated, frozen teacher.
    Measured steps are interleaved across variants. Peak bytes come from
    tracemalloc's high-water mark over ``memory_steps`` separate steps, so
    tracing does not slow the timed loop.
    """
    from .models import Balancer, BinaryModel
    from .training import make_distill_optimizers, stage_rng, distill_step

    warmup = cfg.profile_warmup if warmup is None else warmup
    steps = cfg.profile_steps if steps is None else steps
    if steps <= 0:
        return []
    rng = stage_rng(cfg, "profile")
    n = len(lt)
    batches = [rng.choice(n, size=min(cfg.batch_size, n), replace=False) for _ in range(8)]
    runners = {}
    for variant in variants:
        multi = variant != "single-res"
        teacher = teacher_factory(multi)
        student_res = list(cfg.resolution_tuple) if variant == "direct-multi-res" else None
        vcfg = cfg.replace(multi_res=multi)
        binary = BinaryModel(vcfg, lt.num_classes, stage_rng(vcfg, "profile", 1))
        bal = Balancer(stage_rng(vcfg, "profile", 2), dtype=binary.classifier.weight.dtype)
        opts = make_distill_optimizers(binary, bal, vcfg)

        def run(i, binary=binary, teacher=teacher, bal=bal, opts=opts, vcfg=vcfg, student_res=student_res):
            distill_step(lt.images[batches[i % len(batches)]], binary, teacher, bal, opts, vcfg,
                         step=i, student_resolutions=student_res)

        runners[variant] = run
    for run in runners.values():
        for i in range(warmup):
            run(i)
    # round-robin over variants so slow drift in machine load hits all of them alike
    times = {v: [] for v in runners}
    for i in range(steps):
        for variant, run in runners.items():
            t0 = time.perf_counter()
            run(warmup + i)
            times[variant].append((time.perf_counter() - t0) * 1e3)
    table = []
    for variant, run in runners.items():
        tracemalloc.start()
        tracemalloc.reset_peak()
        for i in range(memory_steps):
            run(i)
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        table.append({"variant": variant, "mean_step_ms": float(np.mean(times[variant])),
                      "std_step_ms": float(np.std(times[variant])), "peak_bytes": int(peak),
                      "steps": steps, "warmup": warmup})
    return table
