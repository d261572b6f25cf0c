#!/usr/bin/env python3
"""Train fused and single-view models per seed and compare their MAE over
frames 2..8 of the training sequence.  Temporal fusion should win on most
seeds once both modes have converged."""

import argparse
import csv

import numpy as np

from raydepth.experiments import fusion_benefit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3])
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--out", default="fusion_benefit.csv")
    args = ap.parse_args()

    rows = []
    for seed in args.seeds:
        fused, single = fusion_benefit_run(seed, epochs=args.epochs)
        rel = (single - fused) / single
        rows.append((seed, fused, single, rel))
        print(f"seed {seed}: fused {fused:.4f} m, single-view {single:.4f} m, improvement {rel:+.1%}")

    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "fused_mae", "single_view_mae", "relative_improvement"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.6g}", f"{row[2]:.6g}", f"{row[3]:.6g}"])
    wins = sum(1 for _, f, s, _ in rows if f <= s)
    print(f"fused wins on {wins}/{len(rows)} seeds; mean improvement "
          f"{np.mean([r[3] for r in rows]):+.1%}; wrote {args.out}")


if __name__ == "__main__":
    main()
