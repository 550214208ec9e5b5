#!/usr/bin/env python3
"""Forward+backward wall time of one bag against the prototype count k."""

import argparse
import dataclasses

from protomixer import experiments
from protomixer.model import forward_flops


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", default="8,16,32,64")
    ap.add_argument("--n", type=int, default=experiments.SCALING_MODEL.N)
    ap.add_argument("--ds", type=int, default=experiments.SCALING_MODEL.D_S)
    ap.add_argument("--dc", type=int, default=experiments.SCALING_MODEL.D_C)
    ap.add_argument("--m", type=int, default=experiments.SCALING_MODEL.M)
    ap.add_argument("--repeats", type=int, default=15)
    args = ap.parse_args()
    ks = [int(k) for k in args.ks.split(",")]
    base = dataclasses.replace(experiments.SCALING_MODEL, N=args.n, D_S=args.ds,
                               D_C=args.dc, M=args.m)
    res = experiments.k_scaling(ks, base, args.repeats)
    print("    k   time[ms]   forward MACs")
    for k, s in zip(res.ks, res.seconds):
        macs = forward_flops(dataclasses.replace(base, k=k))["total"]
        print(f"{k:5d} {s * 1e3:10.3f} {macs:14,d}")
    print(f"linear fit: {res.slope * 1e3:.4f} ms/token + {res.intercept * 1e3:.3f} ms, "
          f"R^2 = {res.r2:.4f}")
    print("doubling ratios:", ", ".join(f"{r:.2f}" for r in res.doubling_ratios))


if __name__ == "__main__":
    main()
