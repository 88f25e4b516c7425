"""Command-line entry point: ``depthbench <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import data
from .report import (MONO_VARIANTS, STEREO_VARIANTS, ConfigError, DataSource, ExperimentConfig,
                     annotate, compare_models, emit_comparison, emit_report, generate_samples,
                     load_config, model_costs, read_report, run_experiment)
from .train import CheckpointError, OptimizerConfig, TrainingDiverged, evaluate_model, load_checkpoint, model_from_config

VARIANTS = sorted(set(MONO_VARIANTS) | set(STEREO_VARIANTS))


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # Subparsers must not overwrite values given before the subcommand.
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(None), help="data and shuffle seed")
        parser.add_argument("--config", type=Path, default=d(None), help="INI experiment config")
        parser.add_argument("--out", type=Path, default=d(None), help="output directory")
        parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=d(True),
                            help="reference mode (always on: float64, fixed reduction order)")
        return parser

    common = global_flags(argparse.ArgumentParser(add_help=False), suppress=True)
    p = global_flags(argparse.ArgumentParser(prog="depthbench", description=__doc__.splitlines()[0]), False)
    sub = p.add_subparsers(dest="command", required=True)

    def task_args(sp, variant=True):
        sp.add_argument("--task", choices=("mono", "stereo"), default=None)
        if variant:
            sp.add_argument("--variant", default=None, help=f"one of {', '.join(VARIANTS)}")
        sp.add_argument("--height", type=int, default=None)
        sp.add_argument("--width", type=int, default=None)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset and manifest")
    task_args(g, variant=False)
    g.add_argument("--count", type=int, default=16)

    t = sub.add_parser("train", parents=[common], help="train, evaluate and write a report")
    task_args(t)
    t.add_argument("--data", type=Path, default=None, help="dataset manifest (default: generate)")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    t.add_argument("--train-count", type=int, default=None)
    t.add_argument("--val-count", type=int, default=None)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("checkpoint", type=Path)
    e.add_argument("--data", type=Path, default=None, help="dataset manifest (default: generate)")
    e.add_argument("--count", type=int, default=16)
    e.add_argument("--height", type=int, default=None)
    e.add_argument("--width", type=int, default=None)

    c = sub.add_parser("count-params", parents=[common], help="parameter and MAC counts of a variant")
    task_args(c)

    m = sub.add_parser("compare", parents=[common], help="comparison table from report files")
    m.add_argument("reports", type=Path, nargs="+")

    r = sub.add_parser("report", parents=[common], help="re-render a report as csv or json")
    r.add_argument("report_path", type=Path)
    r.add_argument("--format", choices=("csv", "json"), default="json")
    return p


def _experiment(args) -> ExperimentConfig:
    """Config file (if any) overlaid with explicit command-line flags."""
    base = ExperimentConfig()
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        base = load_config(args.config.read_text())
    task = getattr(args, "task", None) or base.task
    same_task = task == base.task
    variant = getattr(args, "variant", None) or (base.variant if same_task else
                                                 ("3-1-3" if task == "mono" else "none"))
    src = vars(base.data).copy()
    if not same_task:
        src["height"] = src["width"] = None
    flags = {"seed": args.seed, "height": getattr(args, "height", None), "width": getattr(args, "width", None),
             "train_count": getattr(args, "train_count", None), "val_count": getattr(args, "val_count", None),
             "manifest": str(args.data) if getattr(args, "data", None) else None}
    src.update({k: v for k, v in flags.items() if v is not None})
    opt = vars(base.train).copy()
    flags = {"max_steps": getattr(args, "steps", None), "lr": getattr(args, "lr", None),
             "batch_size": getattr(args, "batch_size", None), "kind": getattr(args, "optimizer", None),
             "seed": args.seed}
    opt.update({k: v for k, v in flags.items() if v is not None})
    keep_id = same_task and variant == base.variant
    return ExperimentConfig(task=task, variant=variant, experiment_id=base.experiment_id if keep_id else "",
                            max_disparity=base.max_disparity, data=DataSource(**src),
                            train=OptimizerConfig(**opt), model_seed=base.model_seed,
                            out_dir=str(args.out) if args.out else base.out_dir)


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2))


def cmd_gen_data(args) -> int:
    cfg = _experiment(args)
    if args.count < 1:
        raise UsageError("--count must be positive")
    samples = generate_samples(cfg.task, cfg.data.seed, args.count, cfg.data.height, cfg.data.width)
    out = Path(args.out or "data")
    data.save_dataset(samples, out)
    print(f"wrote {len(samples)} {cfg.task} samples to {out / 'manifest.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    out = Path(cfg.out_dir) / cfg.experiment_id
    report = run_experiment(cfg, out, log=lambda s: print(s, file=sys.stderr))
    summary = {k: v["mean"] for k, v in report.aggregates.items()}
    _print_json({"experiment_id": cfg.experiment_id, "out": str(out), "parameters": report.parameters,
                 "mean_metrics": summary})
    return 0


def cmd_eval(args) -> int:
    try:
        ckpt = load_checkpoint(args.checkpoint.read_bytes())
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model = model_from_config(ckpt.task, ckpt.model_config)
    model.store.load_state(ckpt.params)
    if ckpt.task == "mono":
        variant = next(k for k, v in MONO_VARIANTS.items()
                       if v == (ckpt.model_config["depth_structure"], ckpt.model_config["activation"]))
        size = ckpt.model_config["input_size"]
        h = w = size
    else:
        variant = next(k for k, v in STEREO_VARIANTS.items() if v == ckpt.model_config["spn_channels"])
        h, w = args.height or 48, args.width or 96
    cfg = ExperimentConfig(task=ckpt.task, variant=variant, max_disparity=ckpt.model_config.get("max_disparity", 32),
                           data=DataSource(seed=args.seed if args.seed is not None else 1, val_count=args.count,
                                           height=h, width=w, manifest=str(args.data) if args.data else None))
    if args.data:
        _, samples = data.load_dataset(args.data)
    else:
        samples = generate_samples(cfg.task, cfg.data.seed + 10_000, args.count, h, w)
    report = annotate(evaluate_model(model, samples), model, cfg)
    payload = emit_report(report, "json")
    if args.out:
        data.atomic_write(Path(args.out) / "report.json", payload)
        data.atomic_write(Path(args.out) / "per_sample.csv", emit_report(report, "csv"))
    sys.stdout.write(payload.decode())
    return 0


def cmd_count_params(args) -> int:
    cfg = _experiment(args)
    model = cfg.build_model()
    _print_json({"task": cfg.task, "variant": cfg.variant, **model_costs(model, cfg.data.height, cfg.data.width)})
    return 0


def cmd_compare(args) -> int:
    if len(args.reports) < 2:
        raise UsageError("compare needs at least two report files")
    reports = []
    for p in args.reports:
        if not p.exists():
            raise UsageError(f"report not found: {p}")
        reports.append(read_report(p))
    table = compare_models(reports)
    if args.out:
        data.atomic_write(Path(args.out) / "comparison.json", emit_comparison(table, "json"))
        data.atomic_write(Path(args.out) / "comparison.csv", emit_comparison(table, "csv"))
    sys.stdout.write(emit_comparison(table, "csv").decode())
    return 0


def cmd_report(args) -> int:
    if not args.report_path.exists():
        raise UsageError(f"report not found: {args.report_path}")
    payload = emit_report(read_report(args.report_path), args.format)
    if args.out:
        data.atomic_write(Path(args.out) / f"report.{args.format}", payload)
    sys.stdout.write(payload.decode())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "count-params": cmd_count_params,
    "compare": cmd_compare,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"depthbench: error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, CheckpointError, data.FormatError, ValueError, OSError) as e:
        print(f"depthbench: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
