#!/usr/bin/env python3
"""Generate the procedural face corpus (hr/, lr/, clean_lr/ PNG sets)."""

import argparse
from pathlib import Path

from flowsr.data import write_procedural_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True, help="corpus root directory")
    ap.add_argument("--count", type=int, default=16)
    ap.add_argument("--hr-size", type=int, default=64)
    ap.add_argument("--lr-factor", type=int, default=4, choices=(2, 4, 8))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    dirs = write_procedural_corpus(Path(args.out), count=args.count,
                                   hr_size=args.hr_size, lr_factor=args.lr_factor,
                                   seed=args.seed)
    for name, d in dirs.items():
        print(f"{name}: {d} ({args.count} images)")


if __name__ == "__main__":
    main()
