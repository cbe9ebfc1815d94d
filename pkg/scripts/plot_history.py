#!/usr/bin/env python3
"""Plot training curves from a history.csv written by `tagl train`.

Left panel: training loss decomposition. Right panel: validation soft Dice
(model selection metric) and BG/SG consistency.

Usage:
    python scripts/plot_history.py runs/tagl/history.csv -o curves.png
"""
import argparse
import csv


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("history", help="history.csv from a training run")
    p.add_argument("-o", "--out", default="curves.png")
    args = p.parse_args()

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(args.history) as fh:
        rows = list(csv.DictReader(fh))
    epochs = [int(r["epoch"]) for r in rows]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [float(r["train_total"]) for r in rows], label="total")
    ax1.plot(epochs, [float(r["train_seg"]) for r in rows], label="seg")
    ax1.plot(epochs, [float(r["train_tagl"]) for r in rows], label="gated")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("training loss")
    ax1.legend()

    ax2.plot(epochs, [float(r["val_soft_dice"]) for r in rows], label="val soft Dice")
    ax2.plot(epochs, [float(r["val_consistency"]) for r in rows], label="val consistency")
    best = max(rows, key=lambda r: float(r["val_soft_dice"]))
    ax2.axvline(int(best["epoch"]), ls="--", c="gray", lw=0.8)
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0, 1.02)
    ax2.legend()

    fig.tight_layout()
    fig.savefig(args.out, dpi=120)
    print(f"wrote {args.out} (best epoch {best['epoch']})")


if __name__ == "__main__":
    main()
