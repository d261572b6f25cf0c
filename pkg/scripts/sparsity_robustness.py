#!/usr/bin/env python3
"""Train at one input sparsity and evaluate the same model at sparser
inputs, reporting the MAE degradation ratios."""

import argparse
import csv

from raydepth.experiments import sparsity_robustness_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--train-fraction", type=float, default=0.005)
    ap.add_argument("--eval-fractions", type=float, nargs="+", default=[0.005, 0.0015, 0.0005])
    ap.add_argument("--out", default="sparsity_robustness.csv")
    args = ap.parse_args()

    result = sparsity_robustness_run(
        seeds=tuple(args.seeds),
        train_fraction=args.train_fraction,
        eval_fractions=tuple(args.eval_fractions),
        epochs=args.epochs,
    )
    base = result[args.train_fraction]
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["eval_fraction", "mae", "ratio_vs_train_sparsity"])
        for frac in args.eval_fractions:
            writer.writerow([frac, f"{result[frac]:.6g}", f"{result[frac] / base:.4f}"])
    for frac in args.eval_fractions:
        print(f"eval {frac:.4%}: MAE {result[frac]:.4f} m (x{result[frac] / base:.2f})")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
