"""Training stages: teacher pretraining, calibration, adversarial distillation, scratch baseline."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checkpoint
from .autograd import SGD, Adam, Node, Role, backward, cosine_lr, no_grad
from .config import TrainConfig
from .errors import ContractViolation, NonFiniteLoss
from .losses import cross_entropy, feature_similarity, kl_div, lt_aware_ce
from .ltdata import Dataset, LTDataset, class_balanced_indices
from .models import Balancer, BinaryModel, TeacherModel

log = logging.getLogger(__name__)

# RNG stream tags, mixed with the master seed
_INIT, _DATA = 1, 2
STAGE_TAGS = {"teacher": 10, "calibrate": 20, "candle": 30, "scratch": 40, "balancer": 50, "profile": 60,
              "student": 70}


def stage_rng(cfg: TrainConfig, stage: str, *extra) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, STAGE_TAGS[stage], *extra])


def param_digest(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.value).tobytes())
    return h.hexdigest()


def module_digest(module) -> str:
    h = hashlib.sha256()
    for name, arr in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class StepLog:
    step: int
    K: float
    F: float
    lam: float
    loss: float
    loss_after_ascent: float
    lr: float
    wall_ms: float

    def record(self) -> dict:
        return {"step": self.step, "K": self.K, "F": self.F, "lambda": self.lam, "L": self.loss,
                "L_post": self.loss_after_ascent, "lr": self.lr, "wall_ms": self.wall_ms}


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps(rec) + "\n")

    def lambdas(self) -> np.ndarray:
        return np.array([r["lambda"] for r in self.steps if "lambda" in r])


def _batches(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # BN needs more than one sample
    return [b for b in out if b.size > 1]


def _accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean()) if labels.size else 0.0


def _epoch_callback(model, test, cfg, epoch, run_log, evaluate_fn):
    if test is None or evaluate_fn is None:
        return
    rep = evaluate_fn(model, test)
    rec = {"epoch": epoch, "mean_acc": rep.mean_acc, "head_acc": rep.head_acc,
           "med_acc": rep.medium_acc, "tail_acc": rep.tail_acc}
    run_log.epochs.append(rec)
    log.info("epoch %d mean %.2f head %.2f med %.2f tail %.2f", epoch, rep.mean_acc,
             rep.head_acc, rep.medium_acc, rep.tail_acc)


# ---------------------------------------------------------------- teacher


def pretrain_teacher(balanced: Dataset, cfg: TrainConfig, run_log: RunLog | None = None) -> TeacherModel:
    """Train the teacher encoder with plain CE on balanced data, then freeze it."""
    run_log = run_log if run_log is not None else RunLog()
    teacher = TeacherModel(cfg, balanced.num_classes, stage_rng(cfg, "teacher", _INIT))
    trainable = teacher.encoder_params() + teacher.pretrain_head.params()
    opt = Adam(trainable, lr=cfg.teacher_lr)
    x_all = balanced.images.astype(teacher.dtype)
    steps_per_epoch = max(1, len(_batches(len(balanced), cfg.batch_size, np.random.default_rng(0))))
    total = cfg.teacher_epochs * steps_per_epoch
    step = 0
    teacher.train()
    for epoch in range(cfg.teacher_epochs):
        correct = 0
        seen = 0
        for idx in _batches(len(balanced), cfg.batch_size, stage_rng(cfg, "teacher", _DATA, epoch)):
            opt.lr = cosine_lr(step, total, cfg.teacher_lr)
            opt.zero_grad()
            logits = teacher.pretrain_logits(x_all[idx])
            loss = cross_entropy(logits, balanced.labels[idx])
            backward(loss)
            opt.step()
            correct += int((logits.value.argmax(1) == balanced.labels[idx]).sum())
            seen += idx.size
            step += 1
        run_log.epochs.append({"epoch": epoch, "stage": "teacher", "train_acc": correct / max(seen, 1)})
    teacher.eval()
    with no_grad():
        logits = np.concatenate([
            teacher.pretrain_logits(x_all[i:i + 256]).value for i in range(0, len(balanced), 256)
        ]) if len(balanced) else np.zeros((0, balanced.num_classes))
    acc = _accuracy(logits, balanced.labels)
    run_log.meta["teacher_train_acc"] = acc
    if cfg.teacher_epochs > 0 and acc < 1.5 / balanced.num_classes:
        msg = f"teacher pretraining did not converge: train acc {acc:.3f}"
        run_log.warnings.append(msg)
        log.warning(msg)
    teacher.freeze_encoder()
    return teacher


def pretrain_accuracy(teacher: TeacherModel, d: Dataset) -> float:
    teacher.eval()
    with no_grad():
        logits = np.concatenate([teacher.pretrain_logits(d.images[i:i + 256]).value
                                 for i in range(0, len(d), 256)])
    return _accuracy(logits, d.labels)


# ---------------------------------------------------------------- calibration


def calibrate(teacher: TeacherModel, lt: LTDataset, cfg: TrainConfig,
              run_log: RunLog | None = None) -> TeacherModel:
    """Train only the matching convs and classifier on LT data.

    Uses class-balanced sampling and label-aware smoothing; the frozen encoder
    runs without gradients at every configured resolution.
    """
    run_log = run_log if run_log is not None else RunLog()
    offending = [p.name for p in teacher.encoder_params() if p.trainable or p.role is not Role.TEACHER_FROZEN]
    if offending:
        raise ContractViolation(f"teacher encoder params are not frozen: {offending[:3]}")
    before = param_digest(teacher.encoder_params())
    for m in teacher.head_modules():
        m.set_role(Role.CLASSIFIER)
    teacher.eval()
    opt = Adam(teacher.head_params(), lr=cfg.calib_lr)
    counts = lt.class_counts
    epoch_len = cfg.calib_epoch_len or len(lt)
    steps_per_epoch = max(1, epoch_len // cfg.batch_size)
    total = cfg.calib_epochs * steps_per_epoch
    step = 0
    for epoch in range(cfg.calib_epochs):
        draws = class_balanced_indices(lt, epoch_len, [cfg.seed, STAGE_TAGS["calibrate"], _DATA, epoch])
        losses = []
        for b in range(steps_per_epoch):
            idx = draws[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.lr = cosine_lr(step, total, cfg.calib_lr)
            opt.zero_grad()
            _, logits = teacher.head(teacher.encoder_maps(lt.images[idx]))
            loss = lt_aware_ce(logits, lt.labels[idx], counts, cfg.eps_head, cfg.eps_tail)
            backward(loss)
            opt.step()
            losses.append(float(loss.value))
            step += 1
        run_log.epochs.append({"epoch": epoch, "stage": "calibrate", "loss": float(np.mean(losses))})
    if param_digest(teacher.encoder_params()) != before:
        raise ContractViolation("teacher encoder changed during calibration")
    teacher.freeze_all()
    return teacher


# ---------------------------------------------------------------- distillation


@dataclass
class DistillOptimizers:
    binary: Adam
    balancer: ag.Optimizer
    lr0: float
    balancer_lr0: float

    def set_lr(self, step: int, total: int):
        factor = cosine_lr(step, total, 1.0)
        self.binary.lr = self.lr0 * factor
        self.balancer.lr = self.balancer_lr0 * factor

    def state_tensors(self) -> dict:
        out = {f"binary/{k}": v for k, v in self.binary.state_tensors().items()}
        out.update({f"balancer/{k}": v for k, v in self.balancer.state_tensors().items()})
        return out

    def load_state_tensors(self, tensors: dict):
        self.binary.load_state_tensors({k[len("binary/"):]: v for k, v in tensors.items() if k.startswith("binary/")})
        self.balancer.load_state_tensors({k[len("balancer/"):]: v for k, v in tensors.items()
                                          if k.startswith("balancer/")})


def make_distill_optimizers(binary: BinaryModel, bal: Balancer, cfg: TrainConfig) -> DistillOptimizers:
    if cfg.weight_decay != 0:
        raise ContractViolation("CANDLE binary training requires zero weight decay")
    opt = Adam(binary.params(), lr=cfg.lr, weight_decay=0.0)
    blr = cfg.effective_balancer_lr
    if cfg.balancer_optimizer == "adam":
        bopt = Adam(bal.params(), lr=blr, maximize=True)
    else:
        bopt = SGD(bal.params(), lr=blr, maximize=True)
    return DistillOptimizers(opt, bopt, cfg.lr, blr)


def _resize_batch(x: np.ndarray, size: int) -> np.ndarray:
    return ag.resize_nearest_array(x, size)


def distill_step(x: np.ndarray, binary: BinaryModel, teacher: TeacherModel, bal: Balancer,
                 opts: DistillOptimizers, cfg: TrainConfig, step: int = 0,
                 student_resolutions=None, batch_index: int | None = None) -> StepLog:
    """One adversarially balanced distillation step.

    Order of updates: classifier descends K alone; the balancer ascends
    L = (1 - lam) K + lam F; the encoder descends L using the lam computed
    before the ascent. All gradients come from the same forward pass.
    ``student_resolutions`` feeds the binary network several input sizes
    (the direct multi-resolution variant); by default it sees only the base size.
    """
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=binary.classifier.weight.dtype)
    teacher.eval()
    with no_grad():
        e_t, logits_t = teacher(x)
        e_t, logits_t = e_t.value, logits_t.value
    binary.train()
    binary.zero_grad()
    bal.zero_grad()

    sizes = student_resolutions or [x.shape[2]]
    weight = 1.0 / len(sizes)
    ks, fs, feats, kgrads, fgrads = [], [], [], [], []
    for size in sizes:
        feat = binary.features(_resize_batch(x, size))
        h_k = Node(feat.value, requires_grad=True)
        h_f = Node(feat.value, requires_grad=True)
        k_loss = kl_div(logits_t, binary.classifier(h_k), cfg.kl_temperature)
        f_loss = feature_similarity(e_t, h_f)
        kv, fv = float(k_loss.value), float(f_loss.value)
        if not (np.isfinite(kv) and np.isfinite(fv)):
            where = f" in batch {batch_index}" if batch_index is not None else ""
            raise NonFiniteLoss(f"non-finite loss{where} at step {step}: K={kv}, F={fv}")
        backward(k_loss, np.asarray(weight, dtype=x.dtype))
        backward(f_loss, np.asarray(weight, dtype=x.dtype))
        ks.append(kv)
        fs.append(fv)
        feats.append(feat)
        kgrads.append(h_k.grad)
        fgrads.append(h_f.grad)
    k_val, f_val = float(np.mean(ks)), float(np.mean(fs))

    # classifier: descend K only
    opts.binary.step(roles=Role.CLASSIFIER)

    # balancer: ascend L with K, F as constants
    lam_node = bal(k_val, f_val)
    lam = float(lam_node.value)
    loss = (1 - lam) * k_val + lam * f_val
    lam_used = lam
    for i in range(cfg.minmax_ratio):
        if i:
            bal.zero_grad()
            lam_node = bal(k_val, f_val)
        mixed = lam_node * (f_val - k_val) + k_val
        backward(mixed)
        opts.balancer.step()
    with no_grad():
        lam_post = float(bal(k_val, f_val).value)
    loss_post = (1 - lam_post) * k_val + lam_post * f_val
    if cfg.reeval_lambda:
        lam_used = lam_post

    # encoder: descend L through both losses
    for feat, gk, gf in zip(feats, kgrads, fgrads):
        backward(feat, (1 - lam_used) * gk + lam_used * gf)
    opts.binary.step(roles=Role.ENCODER)

    bal.last_lambda, bal.last_k, bal.last_f = lam, k_val, f_val
    return StepLog(step, k_val, f_val, lam, loss, loss_post, opts.binary.lr,
                   (time.perf_counter() - t0) * 1e3)


def _binary_checkpoint_tensors(binary: BinaryModel, bal: Balancer | None = None) -> dict:
    out = {name: arr for name, arr in binary.state_dict().items()}
    if bal is not None:
        out.update(bal.state_dict())
    return out


def save_binary(path, binary, cfg, stage: str, epoch: int, metrics: dict | None = None,
                bal=None, opt_state=None, extra: dict | None = None):
    sidecar = {"config_hash": cfg.digest(), "config": cfg.to_dict(), "stage": stage, "epoch": epoch,
               "metrics": metrics or {}, "mode": {"multi_res": cfg.multi_res}, "model": "binary",
               "num_classes": int(binary.classifier.weight.shape[0])}
    if extra:
        sidecar.update(extra)
    checkpoint.save(path, _binary_checkpoint_tensors(binary, bal), opt_state, sidecar)


def save_teacher(path, teacher: TeacherModel, cfg, stage: str, metrics: dict | None = None):
    sidecar = {"config_hash": cfg.digest(), "config": cfg.to_dict(), "stage": stage,
               "metrics": metrics or {}, "mode": {"multi_res": cfg.multi_res}, "model": "teacher",
               "num_classes": teacher.num_classes,
               "frozen": {p.name: not p.trainable for p in teacher.params()}}
    checkpoint.save(path, teacher.state_dict(), None, sidecar)


def load_teacher(path, cfg: TrainConfig | None = None) -> TeacherModel:
    from .config import config_from_dict

    side = checkpoint.load_sidecar(path)
    cfg = cfg or config_from_dict(side["config"])
    teacher = TeacherModel(cfg, side["num_classes"], np.random.default_rng(0))
    tensors, _ = checkpoint.load(path)
    teacher.load_state_dict(tensors)
    if side.get("stage") == "pretrain":
        teacher.freeze_encoder()
    else:
        teacher.freeze_all()
    teacher.eval()
    return teacher


def load_binary(path, cfg: TrainConfig | None = None) -> BinaryModel:
    from .config import config_from_dict

    side = checkpoint.load_sidecar(path)
    cfg = cfg or config_from_dict(side["config"])
    binary = BinaryModel(cfg, side["num_classes"], np.random.default_rng(0))
    tensors, _ = checkpoint.load(path)
    binary.load_state_dict(tensors, strict=True)
    binary.eval()
    return binary


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return len(_batches(n, batch_size, np.random.default_rng(0)))


def train_candle(cfg: TrainConfig, lt: LTDataset, teacher: TeacherModel, test: Dataset | None = None,
                 out_dir=None, resume=None, evaluate_fn=None,
                 stop_after_epoch: int | None = None) -> tuple[BinaryModel, RunLog]:
    """Distill a binary network from the calibrated, frozen teacher."""
    cfg.validate()
    if any(p.trainable for p in teacher.params()):
        raise ContractViolation("teacher must be calibrated and fully frozen before distillation")
    run_log = RunLog(meta={"stage": "candle", "config_hash": cfg.digest()})
    binary = BinaryModel(cfg, lt.num_classes, stage_rng(cfg, "student", _INIT))
    bal = Balancer(stage_rng(cfg, "balancer", _INIT), dtype=binary.classifier.weight.dtype)
    opts = make_distill_optimizers(binary, bal, cfg)
    spe = _steps_per_epoch(len(lt), cfg.batch_size)
    total = cfg.epochs * spe
    start_epoch = 0
    if resume is not None:
        tensors, opt_state = checkpoint.load(resume)
        binary.load_state_dict(tensors)
        bal.load_state_dict(tensors)
        opts.load_state_tensors(opt_state or {})
        start_epoch = checkpoint.load_sidecar(resume)["epoch"] + 1
    x_all = lt.images
    step = start_epoch * spe
    for epoch in range(start_epoch, cfg.epochs):
        for b, idx in enumerate(_batches(len(lt), cfg.batch_size, stage_rng(cfg, "candle", _DATA, epoch))):
            opts.set_lr(step, total)
            rec = distill_step(x_all[idx], binary, teacher, bal, opts, cfg, step=step, batch_index=b)
            run_log.steps.append(rec.record())
            step += 1
        _epoch_callback(binary, test, cfg, epoch, run_log, evaluate_fn)
        if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_binary(Path(out_dir) / f"candle_epoch{epoch:04d}.cndk", binary, cfg, "candle", epoch,
                        bal=bal, opt_state=opts.state_tensors())
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    binary.eval()
    run_log.meta["final_lambda"] = bal.last_lambda
    return binary, run_log


# ---------------------------------------------------------------- scratch baseline


def train_scratch_baseline(cfg: TrainConfig, lt: Dataset, test: Dataset | None = None,
                           evaluate_fn=None) -> tuple[BinaryModel, RunLog]:
    """Plain cross-entropy training of the binary network on LT data."""
    cfg.validate(candle_stage=False)
    run_log = RunLog(meta={"stage": "scratch", "config_hash": cfg.digest(),
                           "optimizer": cfg.scratch_optimizer})
    # same init stream as the CANDLE student so paired runs differ only in training
    binary = BinaryModel(cfg, lt.num_classes, stage_rng(cfg, "student", _INIT))
    lr0 = cfg.effective_scratch_lr
    if cfg.scratch_optimizer == "adam":
        opt = Adam(binary.params(), lr=lr0, weight_decay=cfg.scratch_weight_decay)
    else:
        opt = SGD(binary.params(), lr=lr0, momentum=cfg.scratch_momentum,
                  weight_decay=cfg.scratch_weight_decay)
    spe = _steps_per_epoch(len(lt), cfg.batch_size)
    total = cfg.epochs * spe
    step = 0
    x_all = lt.images
    binary.train()
    for epoch in range(cfg.epochs):
        for idx in _batches(len(lt), cfg.batch_size, stage_rng(cfg, "scratch", _DATA, epoch)):
            t0 = time.perf_counter()
            opt.lr = cosine_lr(step, total, lr0)
            opt.zero_grad()
            _, logits = binary(x_all[idx].astype(binary.classifier.weight.dtype))
            loss = cross_entropy(logits, lt.labels[idx])
            if not np.isfinite(loss.value):
                raise NonFiniteLoss(f"non-finite scratch loss at step {step}")
            backward(loss)
            opt.step()
            run_log.steps.append({"step": step, "loss": float(loss.value), "lr": opt.lr,
                                  "wall_ms": (time.perf_counter() - t0) * 1e3})
            step += 1
        _epoch_callback(binary, test, cfg, epoch, run_log, evaluate_fn)
        binary.train()
    binary.eval()
    return binary, run_log


