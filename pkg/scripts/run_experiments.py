#!/usr/bin/env python3
"""Run all four experiment families for one scenario config.

Usage:
    python3 scripts/run_experiments.py --config configs/quick.toml --out results/
"""

import argparse
import sys

from ddlink.cli import main as cli_main


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="scenario TOML file")
    parser.add_argument("--out", default="results", help="output directory")
    parser.add_argument("--seed", type=int, help="override the config seed")
    args = parser.parse_args()

    base = []
    if args.config:
        base += ["--config", args.config]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]
    base += ["--out", args.out]

    for command in ("sumrate-oma", "sumrate-cfo", "ber", "optimize"):
        print(f"== {command} ==")
        rc = cli_main([command] + base)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
