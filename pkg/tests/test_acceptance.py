"""Acceptance gate: one printed PASS/FAIL line per criterion.

Criteria 5 and 6 share three paired desk-scale runs (about 15 minutes on one
CPU core); criterion 7 times 220 steps per variant (about 4 minutes).
"""

import copy
from pathlib import Path

import numpy as np
import pytest

from candle import bitcore, experiment, ltdata, training
from candle.analysis import profile_step_costs
from candle.autograd import Node
from candle.config import load_config
from candle.models import Balancer, BinaryModel, TeacherModel

from conftest import tiny_config
from gradcases import CASES, check_balancer, check_case
from oracles import dense_conv2d, sign_pm1

ACCEPTANCE_CFG = Path(__file__).with_name("acceptance.cfg")
SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_c1_lt_sizes(verdict):
    expected = {("cifar10", 10): 20431, ("cifar10", 100): 12406,
                ("cifar100", 10): 19573, ("cifar100", 100): 10847}
    got = {}
    for (name, ratio), n in expected.items():
        k, per_class = (10, 5000) if name == "cifar10" else (100, 500)
        src = ltdata.Dataset(None, np.repeat(np.arange(k), per_class), k)
        got[(name, ratio)] = len(ltdata.derive_lt(src, ratio, seed=0))
    verdict(1, got == expected, f"sizes {list(got.values())} expected {list(expected.values())}")


def test_c2_kernel_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst, int_fail, trials = 0.0, 0, 1000
    for _ in range(trials):
        k = int(rng.choice([1, 3]))
        n, c, co = (int(v) for v in rng.integers(1, [5, 9, 9]))
        h, w = (int(v) for v in rng.integers(k, 17, size=2))
        stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 2)) if k == 3 else 0
        act = rng.normal(size=(n, c, h, w)).astype(np.float32)
        wt = rng.normal(size=(co, c, k, k)).astype(np.float32)
        ints = bitcore.xnor_conv2d_counts(act, wt, stride, padding)
        ref = dense_conv2d(sign_pm1(act), sign_pm1(wt), stride, padding, pad_value=1.0)
        int_fail += int(not np.array_equal(ints, ref.astype(np.int64)))
        alpha = np.abs(wt.astype(np.float64)).reshape(co, -1).mean(axis=1)
        scaled = bitcore.binary_conv2d(act, wt, bitcore.compute_alpha(wt), stride, padding)
        ref_scaled = ref * alpha[None, :, None, None]
        worst = max(worst, float(np.max(np.abs(scaled - ref_scaled)) / max(np.max(np.abs(ref_scaled)), 1e-12)))
    verdict(2, int_fail == 0 and worst <= 1e-6,
            f"{trials} shapes, integer mismatches {int_fail}, max scaled rel err {worst:.2e} (tol 1e-6)")


def test_c3_gradients(verdict):
    rng = np.random.default_rng(7)
    worst = {}
    for name in CASES:
        worst[name] = max(check_case(name, rng, np.float32) for _ in range(50))
    worst["balancer_mlp"] = max(check_balancer(rng, np.float32) for _ in range(50))
    bad = {k: v for k, v in worst.items() if not v <= 1e-3}
    top = max(worst, key=worst.get)
    verdict(3, not bad, f"{len(worst)} checks x 50 instances (f32), worst {top} {worst[top]:.2e} (tol 1e-3)"
            + (f", failing {sorted(bad)}" if bad else ""))


class _ShiftedFeatures:
    """Teacher wrapper that perturbs the feature target F and leaves the logits (K) alone."""

    def __init__(self, teacher, shift):
        self.teacher, self.shift = teacher, shift

    def eval(self):
        self.teacher.eval()

    def __call__(self, x):
        e, logits = self.teacher(x)
        return Node(e.value + self.shift), logits


def test_c4_adversarial_step(verdict):
    cfg = tiny_config(balancer_lr=1e-3)
    lt = experiment.lt_dataset(cfg)
    teacher = training.pretrain_teacher(experiment.teacher_dataset(cfg), cfg)
    training.calibrate(teacher, lt, cfg)
    rng = np.random.default_rng(11)
    binary = BinaryModel(cfg, lt.num_classes, np.random.default_rng(1))
    bal = Balancer(np.random.default_rng(2))
    opts = training.make_distill_optimizers(binary, bal, cfg)
    fails = {"a": 0, "b": 0, "c": 0, "d": 0}
    for step in range(100):
        idx = rng.choice(len(lt), 16, replace=False)
        probe = copy.deepcopy((binary, bal, opts))
        rec = training.distill_step(lt.images[idx], binary, teacher, bal, opts, cfg, step=step)
        fails["a"] += any(p.grad_allocated and np.any(p.grad != 0) for p in teacher.params())
        shift = rng.normal(size=cfg.feature_width).astype(np.float32)
        pb, pbal, popts = probe
        training.distill_step(lt.images[idx], pb, _ShiftedFeatures(teacher, shift), pbal, popts, cfg, step=step)
        fails["b"] += any(not np.array_equal(a.value, b.value)
                          for a, b in zip(binary.classifier_params(), pb.classifier_params()))
        fails["c"] += not rec.loss_after_ascent >= rec.loss - 1e-6
        fails["d"] += not 0.0 < rec.lam < 1.0
    verdict(4, not any(fails.values()), f"100 steps, violations (a,b,c,d) = {tuple(fails.values())}")


@pytest.fixture(scope="module")
def paired_runs():
    cfg = load_config(ACCEPTANCE_CFG).validate()
    return [experiment.run_paired(cfg.replace(seed=s)) for s in SEEDS]


def test_c5_desk_scale_efficacy(paired_runs, verdict):
    gains = [r.candle.mean_acc - r.scratch.mean_acc for r in paired_runs]
    tail = [r.candle.tail_acc - r.scratch.tail_acc for r in paired_runs]
    med_gain = float(np.median(gains))
    med_tail = float(np.median(tail))
    detail = (f"median mean-acc gain {med_gain:+.2f} (need >= 5), median tail gain {med_tail:+.2f} (need > 0); "
              + "; ".join(f"seed {r.seed}: {r.candle.mean_acc:.1f} vs {r.scratch.mean_acc:.1f}, "
                          f"tail {r.candle.tail_acc:.1f} vs {r.scratch.tail_acc:.1f}" for r in paired_runs))
    verdict(5, med_gain >= 5.0 and med_tail > 0, detail)


def test_c6_norm_dispersion(paired_runs, verdict):
    pairs = [(r.candle_norms.cv, r.scratch_norms.cv) for r in paired_runs]
    verdict(6, all(c < s for c, s in pairs),
            "CV candle vs scratch: " + ", ".join(f"{c:.3f} < {s:.3f}" for c, s in pairs))


def test_c7_multires_cost(verdict):
    cfg = load_config(ACCEPTANCE_CFG).validate()
    lt = experiment.lt_dataset(cfg)

    def factory(multi):
        t = TeacherModel(cfg.replace(multi_res=multi), lt.num_classes, np.random.default_rng(0))
        t.freeze_all()
        t.eval()
        return t

    table = {r["variant"]: r for r in profile_step_costs(cfg, lt, factory, warmup=20, steps=200)}
    single = table["single-res"]["mean_step_ms"]
    multi = table["multi-res-teacher"]["mean_step_ms"]
    direct = table["direct-multi-res"]["mean_step_ms"]
    ok = single <= multi <= 1.6 * single and direct > multi
    verdict(7, ok, f"step ms single {single:.1f}, multi-res teacher {multi:.1f} (ratio {multi / single:.2f}, "
                   f"tol 1.6), direct multi-res {direct:.1f}; peak MB "
                   + ", ".join(f"{v} {r['peak_bytes'] / 2**20:.1f}" for v, r in table.items()))


def test_c8_determinism(verdict, tmp_path):
    cfg = tiny_config()
    digests = []
    for run in ("a", "b"):
        d = tmp_path / run
        lt = experiment.lt_dataset(cfg)
        ltdata.save_dataset(d / "lt.cndk", lt)
        teacher = training.pretrain_teacher(experiment.teacher_dataset(cfg), cfg)
        training.save_teacher(d / "pretrain.cndk", teacher, cfg, "pretrain")
        training.calibrate(teacher, lt, cfg)
        training.save_teacher(d / "calibrate.cndk", teacher, cfg, "calibrate")
        binary, _ = training.train_candle(cfg, lt, teacher)
        training.save_binary(d / "candle.cndk", binary, cfg, "candle", cfg.epochs - 1)
        scratch, _ = training.train_scratch_baseline(cfg, lt)
        training.save_binary(d / "scratch.cndk", scratch, cfg, "scratch", cfg.epochs - 1)
        digests.append({p.name: p.read_bytes() for p in sorted(d.glob("*.cndk"))})
    same = [name for name in digests[0] if digests[0][name] == digests[1].get(name)]
    verdict(8, len(same) == len(digests[0]) == 5, f"bitwise-identical stage artifacts: {same}")
