"""Parameter and MAC cost of each SPN width, plus a short training run per width.

    python3 scripts/ablate_spn_channels.py --steps 200
"""
import argparse
import json
import sys

import numpy as np

from depthbench import data, stereo
from depthbench.nn import count_flops, count_parameters
from depthbench.stereo import AnyNetConfig
from depthbench.train import OptimizerConfig, evaluate_model, train_model


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--train-count", type=int, default=128)
    ap.add_argument("--val-count", type=int, default=32)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)
    train_set = data.gen_synthetic_stereo(args.seed, args.train_count)
    val_set = data.gen_synthetic_stereo(args.seed + 1, args.val_count)
    rows = []
    for ch in stereo.SPN_SWEEP:
        model = stereo.build_anynet(AnyNetConfig(max_disparity=32, spn_channels=ch), seed=0)
        params = count_parameters(model.store)["trainable"]
        macs = count_flops(model, (1, 3, 48, 96))["total"]
        if args.steps:
            train_model(model, train_set, OptimizerConfig(lr=2e-3, max_steps=args.steps))
        agg = evaluate_model(model, val_set).aggregates
        rows.append({"spn_channels": ch, "trainable": params, "macs": macs,
                     **{f"3px_stage{k}": float(np.round(agg[f"three_pixel_error_stage{k}"]["mean"], 6))
                        for k in (1, 2, 3, 4)}})
        print(json.dumps(rows[-1]), file=sys.stderr)
    print(json.dumps(rows, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
