"""Train every mono and stereo variant at desk scale and write comparison tables.

    python3 scripts/run_variant_matrix.py --out runs/matrix --steps 500
"""
import argparse
import sys
from pathlib import Path

from depthbench.data import atomic_write
from depthbench.report import (ExperimentConfig, compare_models, emit_comparison, run_experiment,
                               variants_for)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/matrix")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--tasks", nargs="+", default=["mono", "stereo"], choices=["mono", "stereo"])
    ap.add_argument("--train-count", type=int, default=128)
    ap.add_argument("--val-count", type=int, default=32)
    args = ap.parse_args(argv)
    root = Path(args.out)
    for task in args.tasks:
        reports = []
        for variant in variants_for(task):
            cfg = ExperimentConfig(task=task, variant=variant)
            cfg.data.seed = args.seed
            cfg.data.train_count, cfg.data.val_count = args.train_count, args.val_count
            cfg.train.max_steps = args.steps
            cfg.train.lr = 1e-3 if task == "mono" else 2e-3
            print(f"[{task} {variant}] training {args.steps} steps", file=sys.stderr)
            reports.append(run_experiment(cfg, root / cfg.experiment_id,
                                          log=lambda m: print(f"  {m}", file=sys.stderr)))
        table = compare_models(reports)
        atomic_write(root / f"comparison_{task}.json", emit_comparison(table, "json"))
        atomic_write(root / f"comparison_{task}.csv", emit_comparison(table, "csv"))
        sys.stdout.write(emit_comparison(table, "csv").decode())
    return 0


if __name__ == "__main__":
    sys.exit(main())
