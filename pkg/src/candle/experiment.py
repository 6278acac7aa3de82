"""Dataset construction from a config and the paired CANDLE-vs-scratch pipeline."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import analysis, ltdata, training
from .config import TrainConfig

log = logging.getLogger(__name__)

SPLIT_TRAIN, SPLIT_TEACHER, SPLIT_TEST = "train", "teacher", "test"


def source_dataset(cfg: TrainConfig) -> ltdata.Dataset:
    """The balanced source the LT training set is derived from."""
    if cfg.source == "synth":
        return ltdata.synth_generate(cfg.num_classes, cfg.synth_per_class, cfg.image_size,
                                     cfg.synth_separation, cfg.seed, SPLIT_TRAIN, cfg.synth_noise,
                                     jitter=cfg.synth_jitter)
    if cfg.source == "labels":
        labels = np.repeat(np.arange(cfg.num_classes), cfg.source_per_class)
        return ltdata.Dataset(None, labels, cfg.num_classes, name=f"labels{cfg.num_classes}")
    return ltdata.load_cifar_binary(cfg.data_dir, cfg.source, "train")


def teacher_dataset(cfg: TrainConfig) -> ltdata.Dataset:
    """Balanced pretraining data for the teacher (disjoint noise from the LT source)."""
    if cfg.source == "synth":
        return ltdata.synth_generate(cfg.num_classes, cfg.synth_teacher_per_class, cfg.image_size,
                                     cfg.synth_separation, cfg.seed, SPLIT_TEACHER, cfg.synth_noise,
                                     jitter=cfg.synth_jitter)
    return ltdata.load_cifar_binary(cfg.data_dir, cfg.source, "train")


def test_dataset(cfg: TrainConfig) -> ltdata.Dataset:
    if cfg.source == "synth":
        return ltdata.synth_generate(cfg.num_classes, cfg.synth_test_per_class, cfg.image_size,
                                     cfg.synth_separation, cfg.seed, SPLIT_TEST, cfg.synth_noise,
                                     jitter=cfg.synth_jitter)
    return ltdata.load_cifar_binary(cfg.data_dir, cfg.source, "test")


def lt_dataset(cfg: TrainConfig) -> ltdata.LTDataset:
    return ltdata.derive_lt(source_dataset(cfg), cfg.ratio, cfg.seed)


def make_partition(cfg: TrainConfig, lt: ltdata.LTDataset) -> ltdata.ClassPartition:
    return ltdata.partition_classes(lt.class_counts, lt.class_order, scheme=cfg.partition)


@dataclass
class PairedResult:
    seed: int
    candle: analysis.EvalReport
    scratch: analysis.EvalReport
    teacher: analysis.EvalReport
    candle_norms: analysis.NormProfile
    scratch_norms: analysis.NormProfile
    candle_log: training.RunLog
    scratch_log: training.RunLog
    timings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "candle_mean": self.candle.mean_acc, "scratch_mean": self.scratch.mean_acc,
            "candle_tail": self.candle.tail_acc, "scratch_tail": self.scratch.tail_acc,
            "teacher_mean": self.teacher.mean_acc,
            "candle_cv": self.candle_norms.cv, "scratch_cv": self.scratch_norms.cv,
            "final_lambda": self.candle_log.meta.get("final_lambda"),
            **{f"time_{k}": v for k, v in self.timings.items()},
        }


def run_paired(cfg: TrainConfig) -> PairedResult:
    """Pretrain, calibrate and distill with CANDLE, and train the scratch baseline."""
    timings = {}
    lt = lt_dataset(cfg)
    test = test_dataset(cfg)
    part = make_partition(cfg, lt)

    def ev(model, d):
        return analysis.evaluate(model, d, part)

    t0 = time.perf_counter()
    teacher = training.pretrain_teacher(teacher_dataset(cfg), cfg)
    timings["pretrain"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    training.calibrate(teacher, lt, cfg)
    timings["calibrate"] = time.perf_counter() - t0
    teacher_rep = ev(teacher, test)
    t0 = time.perf_counter()
    binary, clog = training.train_candle(cfg, lt, teacher)
    timings["candle"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    scratch, slog = training.train_scratch_baseline(cfg, lt)
    timings["scratch"] = time.perf_counter() - t0
    order = lt.class_order
    result = PairedResult(
        cfg.seed, ev(binary, test), ev(scratch, test), teacher_rep,
        analysis.classifier_norms(binary.state_dict(), order),
        analysis.classifier_norms(scratch.state_dict(), order),
        clog, slog, timings,
    )
    log.info("seed %d: %s", cfg.seed, result.summary())
    return result
