#!/usr/bin/env python3
"""Headline experiment: CE-only vs CE+TAGL over a seed matrix.

Trains both configurations on seed-matched phantom datasets, prints the
per-seed test metrics and the seed-averaged Dice delta, and writes the
ablation CSV. With the defaults this is the full-scale comparison
(128x128, 400/100/100 cases, 5 seeds) and takes several minutes on a CPU.

Usage:
    python scripts/run_comparison.py [--seeds 1 2 3 4 5] [--out ablation.csv]
    python scripts/run_comparison.py --quick        # small, ~1 minute
"""
import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from tagl.fileio import write_ablation_csv
from tagl.gridmap import GridShape
from tagl.phantom import PhantomConfig
from tagl.trainer import TrainConfig, run_ablation, ABLATION_EPOCHS


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3, 4, 5])
    p.add_argument("--configs", nargs="+", default=["ce", "ce_tagl"])
    p.add_argument("--out", default="ablation.csv")
    p.add_argument("--quick", action="store_true",
                   help="60/15/15 cases and more epochs instead of the full 400/100/100")
    return p.parse_args()


def main():
    args = parse_args()
    if args.quick:
        pcfg = PhantomConfig()
        base = TrainConfig(epochs=10, n_train=60, n_val=15, n_test=15)
    else:
        pcfg = PhantomConfig()
        base = TrainConfig(epochs=ABLATION_EPOCHS)

    t0 = time.time()
    rows = run_ablation(args.configs, args.seeds, pcfg, base)
    write_ablation_csv(rows, args.out)

    print(f"\n{'config':16s} {'seed':>4s} {'dice':>8s} {'iou':>8s} {'consistency':>12s} {'mae':>6s}")
    for r in rows:
        print(f"{r['config']:16s} {r['seed']:4d} {r['mean_dice']:8.4f} "
              f"{r['mean_iou']:8.4f} {r['consistency']:12.4f} {r['aspects_mae']:6.2f}")

    by_config = {
        name: np.mean([r["mean_dice"] for r in rows if r["config"] == name])
        for name in args.configs
    }
    print("\nseed-averaged test Dice:")
    for name, value in by_config.items():
        print(f"  {name:16s} {value:.4f}")
    if "ce" in by_config and "ce_tagl" in by_config:
        print(f"  delta (ce_tagl - ce): {by_config['ce_tagl'] - by_config['ce']:+.4f}")
    print(f"\nwrote {args.out}  ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
