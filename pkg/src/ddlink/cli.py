"""Command-line entry point for the experiment harness.

Subcommands: sumrate-oma, sumrate-cfo, ber, optimize.  Each reads an
optional TOML scenario config, applies --seed/--profile overrides, runs
the experiment and writes <experiment>.csv plus <experiment>.meta into
--out.  Exit codes: 0 success, 2 configuration error, 3 scenario or
channel error, 4 optimizer failure, 5 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .sim import (
    ConfigError,
    ScenarioConfig,
    emit_report,
    load_config,
    run_ber,
    run_optimizer,
    run_sumrate_cfo,
    run_sumrate_oma,
)
from .subproblem import SubproblemError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCENARIO = 3
EXIT_SOLVER = 4
EXIT_IO = 5


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ddlink",
        description="Delay-Doppler link simulator and resource-allocation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("sumrate-oma", "sum rate of the four orthogonal access schemes vs SNR"),
        ("sumrate-cfo", "OTFS vs OFDM sum rate across the CFO grid"),
        ("ber", "Monte-Carlo bit error rate for the detection chains"),
        ("optimize", "penalty-CCP power/schedule optimization vs OMA baselines"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="PATH", help="scenario TOML file")
        p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
        p.add_argument("--out", default=".", metavar="DIR", help="output directory")
        p.add_argument(
            "--profile",
            choices=("ntn-tdl-b", "ntn-tdl-d"),
            help="override the channel profile",
        )
    return parser


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.profile is not None:
        cfg = dataclasses.replace(cfg, profile_name=args.profile, profile_file=None)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        if args.command == "sumrate-oma":
            reports = [run_sumrate_oma(cfg)]
        elif args.command == "sumrate-cfo":
            reports = [run_sumrate_cfo(cfg)]
        elif args.command == "ber":
            reports = [run_ber(cfg)]
        else:
            reports = list(run_optimizer(cfg))
        for report in reports:
            csv_path, meta_path = emit_report(report, args.out)
            print(f"wrote {csv_path} ({len(report.rows)} rows) and {meta_path}")
    except ConfigError as exc:
        print(f"ddlink: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SubproblemError as exc:
        print(f"ddlink: optimizer failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, RuntimeError) as exc:
        print(f"ddlink: scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except OSError as exc:
        print(f"ddlink: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
