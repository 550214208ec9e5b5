#!/usr/bin/env python3
"""5-fold CV on the noiseless 60-bag synthetic corpus, reduced to k=5."""

import argparse
import dataclasses
import tempfile

from protomixer import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=experiments.SMALL_TRAIN.epochs)
    ap.add_argument("--lr", type=float, default=experiments.SMALL_TRAIN.learning_rate)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    tcfg = dataclasses.replace(experiments.SMALL_TRAIN, epochs=args.epochs,
                               learning_rate=args.lr, seed=args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        report, seconds = experiments.end_to_end(tmp, tcfg=tcfg, jobs=args.jobs)
    for row in report.rows:
        m = row.metrics
        print(f"fold {row.fold}: macro-F1 {m.macro_f1:.3f}  AUROC {m.auroc:.3f}  "
              f"final class loss {m.losses[-1][1]:.4f}")
    print(f"mean macro-F1 {report.macro_f1_mean:.3f} ± {report.macro_f1_std:.3f}, "
          f"AUROC {report.auroc_mean:.3f} ± {report.auroc_std:.3f}, {seconds:.1f}s")


if __name__ == "__main__":
    main()
