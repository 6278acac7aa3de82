"""Run configuration: flat ``key = value`` files with documented defaults."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError


def _key(default, doc: str, unit: str = ""):
    return field(default=default, metadata={"doc": doc, "unit": unit})


@dataclass
class TrainConfig:
    # data
    source: str = _key("synth", "data source: synth | cifar10 | cifar100 | labels")
    data_dir: str = _key("", "directory (or file) holding CIFAR binary batches", "path")
    ratio: float = _key(50.0, "imbalance ratio of the derived LT training set", "head/tail")
    num_classes: int = _key(10, "classes for synth / labels sources", "classes")
    source_per_class: int = _key(5000, "per-class source size for the labels source", "samples")
    synth_per_class: int = _key(1080, "per-class size of the balanced synth source before LT derivation", "samples")
    synth_teacher_per_class: int = _key(300, "per-class size of the balanced teacher pretraining set", "samples")
    synth_test_per_class: int = _key(100, "per-class size of the balanced synth test set", "samples")
    synth_separation: float = _key(5.0, "class-mean offset of synth data in noise standard deviations", "sigma")
    synth_noise: float = _key(0.1, "synth pixel noise standard deviation", "intensity")
    synth_jitter: int = _key(0, "max random circular shift applied to synth images", "pixels")
    image_size: int = _key(32, "base input resolution B", "pixels")
    seed: int = _key(0, "master random seed")
    # models
    binary_width: int = _key(32, "binary backbone base width; feature width D_B = 4 x width", "channels")
    stem_stride: int = _key(1, "stride of the float stem convolution")
    residual: bool = _key(True, "parameter-free shortcuts around binary blocks")
    activation: str = _key("prelu", "binary block activation: prelu | relu")
    learned_scale: bool = _key(False, "learn per-channel binary conv scales instead of mean |w|")
    ste_clip: float = _key(1.0, "straight-through gradient window |x| <= clip")
    teacher_width: int = _key(16, "teacher encoder base width; encoder output = 4 x width", "channels")
    resolutions: str = _key("16,32,64", "teacher input resolutions S,B,L", "pixels")
    multi_res: bool = _key(True, "multi-resolution teacher head (off: single B path)")
    # teacher pretraining
    teacher_epochs: int = _key(10, "teacher pretraining epochs", "epochs")
    teacher_lr: float = _key(2e-3, "teacher pretraining Adam learning rate")
    # calibration
    calib_epochs: int = _key(10, "calibration epochs", "epochs")
    calib_lr: float = _key(5e-3, "calibration Adam learning rate")
    calib_epoch_len: int = _key(0, "class-balanced draws per calibration epoch (0: LT set size)", "samples")
    eps_head: float = _key(0.0, "label smoothing of the most frequent class")
    eps_tail: float = _key(0.1, "label smoothing of the rarest class")
    # distillation
    epochs: int = _key(20, "binary network training epochs", "epochs")
    batch_size: int = _key(64, "minibatch size", "samples")
    lr: float = _key(0.01, "initial learning rate for the binary network (cosine annealed)")
    weight_decay: float = _key(0.0, "weight decay of binary-network stages; must be 0 for CANDLE")
    kl_temperature: float = _key(1.0, "KL distillation temperature")
    minmax_ratio: int = _key(1, "balancer ascent steps per minimization step")
    balancer_lr: float = _key(-1.0, "balancer learning rate (negative: reuse lr)")
    balancer_optimizer: str = _key("sgd", "balancer ascent rule: sgd (plain gradient ascent) | adam")
    reeval_lambda: bool = _key(False, "recompute lambda after the ascent step for the encoder update")
    checkpoint_every: int = _key(0, "write a resumable checkpoint every N epochs (0: off)", "epochs")
    # scratch baseline
    scratch_optimizer: str = _key("adam", "scratch baseline optimizer: adam | sgd")
    scratch_lr: float = _key(-1.0, "scratch baseline learning rate (negative: reuse lr)")
    scratch_weight_decay: float = _key(0.0, "scratch baseline weight decay")
    scratch_momentum: float = _key(0.9, "scratch baseline SGD momentum")
    # evaluation / profiling
    partition: str = _key("tertile", "head/medium/tail rule: tertile | count")
    profile_warmup: int = _key(20, "profile warmup steps per variant", "steps")
    profile_steps: int = _key(200, "profile measured steps per variant", "steps")
    dtype: str = _key("float32", "storage precision: float32 | float64")

    @property
    def resolution_tuple(self) -> tuple[int, int, int]:
        vals = tuple(int(v) for v in self.resolutions.split(","))
        if len(vals) != 3:
            raise ConfigError("resolutions needs exactly three values S,B,L", "resolutions")
        return vals

    @property
    def feature_width(self) -> int:
        return 4 * self.binary_width

    @property
    def effective_balancer_lr(self) -> float:
        return self.lr if self.balancer_lr < 0 else self.balancer_lr

    @property
    def effective_scratch_lr(self) -> float:
        return self.lr if self.scratch_lr < 0 else self.scratch_lr

    def validate(self, candle_stage: bool = True) -> TrainConfig:
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", key)

        if not self.ratio >= 1:
            bad("ratio", f"imbalance ratio must be >= 1, got {self.ratio}")
        if self.source not in ("synth", "cifar10", "cifar100", "labels"):
            bad("source", f"unknown source {self.source!r}")
        s, b, l_ = self.resolution_tuple
        if not (s <= b <= l_):
            bad("resolutions", "must be ordered S <= B <= L")
        if b != self.image_size:
            bad("resolutions", "B must equal image_size")
        for key in ("batch_size", "minmax_ratio", "num_classes", "binary_width", "teacher_width"):
            if getattr(self, key) < 1:
                bad(key, "must be >= 1")
        if self.kl_temperature <= 0:
            bad("kl_temperature", "must be positive")
        for key in ("eps_head", "eps_tail"):
            if not 0 <= getattr(self, key) < 1:
                bad(key, "must lie in [0, 1)")
        if candle_stage and self.weight_decay != 0:
            bad("weight_decay", "binary-network CANDLE stages require zero weight decay")
        if self.activation not in ("prelu", "relu"):
            bad("activation", f"unknown activation {self.activation!r}")
        if self.scratch_optimizer not in ("adam", "sgd"):
            bad("scratch_optimizer", f"unknown optimizer {self.scratch_optimizer!r}")
        if self.balancer_optimizer not in ("adam", "sgd"):
            bad("balancer_optimizer", f"unknown optimizer {self.balancer_optimizer!r}")
        if self.partition not in ("tertile", "count"):
            bad("partition", f"unknown partition rule {self.partition!r}")
        if self.dtype not in ("float32", "float64"):
            bad("dtype", f"unknown dtype {self.dtype!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(key: str, raw: str):
    ftype = FIELDS[key].type
    raw = raw.strip()
    try:
        if ftype == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if ftype == "int":
            return int(raw)
        if ftype == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {ftype}", key) from None
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"unknown config key {key!r}", key)
        values[key] = _coerce(key, raw)
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path, overrides: dict | None = None) -> TrainConfig:
    cfg = parse_config(Path(path).read_text()) if path else TrainConfig()
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - set(FIELDS)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown config key {key!r}", key)
    return TrainConfig(**d)


def describe_keys() -> str:
    lines = []
    for name, f in FIELDS.items():
        unit = f" [{f.metadata['unit']}]" if f.metadata.get("unit") else ""
        lines.append(f"  {name} = {f.default}{unit}\n      {f.metadata['doc']}")
    return "\n".join(lines)
