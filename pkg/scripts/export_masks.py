#!/usr/bin/env python3
"""Dump the four access-scheme masks as (l, k, user) CSV triples.

Usage:
    python3 scripts/export_masks.py --m 16 --n 8 --k 4 --out masks/
"""

import argparse
import os
import sys

from ddlink.access import SCHEME_BUILDERS, mask_to_csv
from ddlink.grid import FrameParams


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--m", type=int, default=16)
    parser.add_argument("--n", type=int, default=8)
    parser.add_argument("--k", type=int, default=4)
    parser.add_argument("--out", default="masks")
    args = parser.parse_args()

    params = FrameParams(M=args.m, N=args.n, delta_f=15e3)
    os.makedirs(args.out, exist_ok=True)
    for name, builder in SCHEME_BUILDERS.items():
        try:
            mask = builder(params, args.k)
        except ValueError as exc:
            print(f"{name}: skipped ({exc})")
            continue
        path = os.path.join(args.out, f"{name}.csv")
        mask_to_csv(mask, path)
        print(f"{name}: wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
