#!/usr/bin/env python3
"""Analytic parameter count of the full-width model, component by component."""

import argparse

from protomixer.cli import profile_text
from protomixer.model import MixerConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--k", type=int, default=5)
    ap.add_argument("--classes", type=int, default=3)
    ap.add_argument("--domains", type=int, default=1,
                    help="training slides (sizes the domain head)")
    args = ap.parse_args()
    cfg = MixerConfig(k=args.k, N=1024, D_S=1024, D_C=2048, M=12,
                      num_classes=args.classes, num_domains=args.domains)
    print(profile_text(cfg), end="")


if __name__ == "__main__":
    main()
