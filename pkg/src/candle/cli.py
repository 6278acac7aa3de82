"""Command-line entry point: one subcommand per pipeline stage plus the diagnostics.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, checkpoint, experiment, ltdata, training
from .config import describe_keys, dump_config, load_config, parse_config
from .errors import CandleError, ConfigError, InvalidRatio
from .models import TeacherModel

log = logging.getLogger("candle")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for runtime failures here
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file of 'key = value' lines")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="candle", formatter_class=argparse.RawDescriptionHelpFormatter,
                     description="Train and analyse 1-bit networks on long-tailed data.",
                     epilog="config keys (default [unit]):\n" + describe_keys())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_, *extra):
        p = sub.add_parser(name, help=help_)
        _common(p)
        for flag, kw in extra:
            p.add_argument(flag, **kw)
        return p

    lt = ("--lt", {"help": "LT dataset container from derive-lt (default: derive from config)"})
    teacher = ("--teacher", {"help": "teacher checkpoint"})
    add("derive-lt", "subsample the balanced source into a long-tailed training set")
    add("pretrain-teacher", "pretrain the full-precision teacher encoder on balanced data")
    add("calibrate", "calibrate the teacher heads on the LT set", lt, ("--teacher", {"required": True}))
    add("distill", "train the binary network with CANDLE", lt, ("--teacher", {"required": True}),
        ("--resume", {"help": "resume from an epoch checkpoint"}))
    add("train-scratch", "train the binary network with plain cross-entropy", lt)
    add("evaluate", "evaluate a checkpoint on the test set", lt, ("--checkpoint", {"required": True}))
    add("norms", "classifier weight-norm profile of a checkpoint", lt, ("--checkpoint", {"required": True}))
    add("gains", "per-class accuracy gain of a checkpoint over a baseline", lt,
        ("--checkpoint", {"required": True}), ("--baseline", {"required": True}))
    add("profile", "step time and peak memory of the multi-resolution variants", lt, teacher)
    return parser


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = raw
    cfg = load_config(args.config)
    if overrides:
        cfg = parse_config("\n".join(f"{k} = {v}" for k, v in overrides.items()), cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, cfg, command: str, extra: dict | None = None):
    body = {"command": command, "config_hash": cfg.digest(), "config": cfg.to_dict()}
    body.update(extra or {})
    _write_json(out / "manifest.json", body)


def _lt(args, cfg) -> ltdata.LTDataset:
    if args.lt:
        return ltdata.load_dataset(args.lt)
    return experiment.lt_dataset(cfg)


def _write_eval(out: Path, model, cfg, lt, tensors=None):
    test = experiment.test_dataset(cfg)
    part = experiment.make_partition(cfg, lt)
    rep = analysis.evaluate(model, test, part)
    norms = analysis.classifier_norms(tensors, lt.class_order) if tensors is not None else None
    analysis.write_per_class_csv(out / "per_class.csv", rep, lt.class_order, lt.class_counts, norms)
    body = rep.to_dict()
    if norms is not None:
        analysis.write_norms_csv(out / "norms.csv", norms)
        body["norms"] = norms.summary()
    _write_json(out / "report.json", body)
    return rep


def _load_model(path):
    side = checkpoint.load_sidecar(path)
    if side.get("model") == "teacher":
        return training.load_teacher(path), side
    return training.load_binary(path), side


# ---------------------------------------------------------------- commands


def cmd_derive_lt(args, cfg, out):
    cfg.validate(candle_stage=False)
    lt = experiment.lt_dataset(cfg)
    ltdata.save_dataset(out / "lt.cndk", lt)
    _write_json(out / "manifest.json", {"command": "derive-lt", "config_hash": cfg.digest(),
                                        "config": cfg.to_dict(), **lt.manifest()})


def cmd_pretrain_teacher(args, cfg, out):
    cfg.validate(candle_stage=False)
    run_log = training.RunLog()
    teacher = training.pretrain_teacher(experiment.teacher_dataset(cfg), cfg, run_log)
    training.save_teacher(out / "teacher.cndk", teacher, cfg, "pretrain")
    run_log.write_jsonl(out / "steps.jsonl")
    _manifest(out, cfg, "pretrain-teacher", {"checkpoint": "teacher.cndk"})


def cmd_calibrate(args, cfg, out):
    cfg.validate(candle_stage=False)
    lt = _lt(args, cfg)
    teacher = training.load_teacher(args.teacher, cfg)
    run_log = training.RunLog()
    training.calibrate(teacher, lt, cfg, run_log)
    training.save_teacher(out / "teacher_calibrated.cndk", teacher, cfg, "calibrate")
    run_log.write_jsonl(out / "steps.jsonl")
    _write_eval(out, teacher, cfg, lt)
    _manifest(out, cfg, "calibrate", {"checkpoint": "teacher_calibrated.cndk", "teacher": str(args.teacher)})


def cmd_distill(args, cfg, out):
    cfg.validate()
    lt = _lt(args, cfg)
    teacher = training.load_teacher(args.teacher, cfg)
    binary, run_log = training.train_candle(cfg, lt, teacher, out_dir=out, resume=args.resume)
    training.save_binary(out / "candle.cndk", binary, cfg, "candle", cfg.epochs - 1,
                         extra={"final_lambda": run_log.meta.get("final_lambda")})
    run_log.write_jsonl(out / "steps.jsonl")
    _write_eval(out, binary, cfg, lt, binary.state_dict())
    _manifest(out, cfg, "distill", {"checkpoint": "candle.cndk", "teacher": str(args.teacher)})


def cmd_train_scratch(args, cfg, out):
    cfg.validate(candle_stage=False)
    lt = _lt(args, cfg)
    binary, run_log = training.train_scratch_baseline(cfg, lt)
    training.save_binary(out / "scratch.cndk", binary, cfg, "scratch", cfg.epochs - 1)
    run_log.write_jsonl(out / "steps.jsonl")
    _write_eval(out, binary, cfg, lt, binary.state_dict())
    _manifest(out, cfg, "train-scratch", {"checkpoint": "scratch.cndk"})


def cmd_evaluate(args, cfg, out):
    cfg.validate(candle_stage=False)
    lt = _lt(args, cfg)
    model, side = _load_model(args.checkpoint)
    tensors = model.state_dict() if side.get("model") != "teacher" else None
    _write_eval(out, model, cfg, lt, tensors)
    _manifest(out, cfg, "evaluate", {"checkpoint": str(args.checkpoint)})


def cmd_norms(args, cfg, out):
    lt = _lt(args, cfg)
    tensors, _ = checkpoint.load(args.checkpoint)
    profile = analysis.classifier_norms(tensors, lt.class_order)
    analysis.write_norms_csv(out / "norms.csv", profile)
    _write_json(out / "report.json", {"norms": profile.summary(),
                                      "weight_norm": profile.norms.tolist(),
                                      "bias": profile.biases.tolist(),
                                      "class_order": profile.class_order.tolist()})
    _manifest(out, cfg, "norms", {"checkpoint": str(args.checkpoint)})


def cmd_gains(args, cfg, out):
    cfg.validate(candle_stage=False)
    lt = _lt(args, cfg)
    test = experiment.test_dataset(cfg)
    part = experiment.make_partition(cfg, lt)
    model, _ = _load_model(args.checkpoint)
    base, _ = _load_model(args.baseline)
    rep = analysis.evaluate(model, test, part)
    base_rep = analysis.evaluate(base, test, part)
    gain = analysis.gain_report(rep, base_rep)
    analysis.write_per_class_csv(out / "per_class.csv", rep, lt.class_order, lt.class_counts)
    _write_json(out / "report.json", {"gain": gain.to_dict(), "model": rep.to_dict(),
                                      "baseline": base_rep.to_dict()})
    _manifest(out, cfg, "gains", {"checkpoint": str(args.checkpoint), "baseline": str(args.baseline)})


def cmd_profile(args, cfg, out):
    cfg.validate()
    lt = _lt(args, cfg)
    loaded = training.load_teacher(args.teacher, cfg) if args.teacher else None

    def teacher_factory(multi):
        if loaded is not None and loaded.multi_res == multi:
            return loaded
        # step cost does not depend on the weight values, only on the architecture
        t = TeacherModel(cfg.replace(multi_res=multi), lt.num_classes, training.stage_rng(cfg, "profile", 3))
        t.freeze_all()
        t.eval()
        return t

    table = analysis.profile_step_costs(cfg, lt, teacher_factory)
    body = {"variants": table}
    by = {row["variant"]: row for row in table}
    if "single-res" in by and "multi-res-teacher" in by:
        body["multi_over_single"] = by["multi-res-teacher"]["mean_step_ms"] / by["single-res"]["mean_step_ms"]
    _write_json(out / "report.json", body)
    _manifest(out, cfg, "profile")


COMMANDS = {
    "derive-lt": cmd_derive_lt,
    "pretrain-teacher": cmd_pretrain_teacher,
    "calibrate": cmd_calibrate,
    "distill": cmd_distill,
    "train-scratch": cmd_train_scratch,
    "evaluate": cmd_evaluate,
    "norms": cmd_norms,
    "gains": cmd_gains,
    "profile": cmd_profile,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as err:
        print(f"candle: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(dump_config(cfg))
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, InvalidRatio, UsageError) as err:
        msg = str(err)
        if isinstance(err, InvalidRatio) and "ratio" not in msg:
            msg = f"ratio: {msg}"
        print(f"candle: error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except (CandleError, OSError, KeyError, ValueError) as err:
        print(f"candle: {args.command} failed: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
