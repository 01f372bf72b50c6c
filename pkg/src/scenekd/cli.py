"""Command-line entry point for the experiment pipeline.

Exit codes: 0 success, 2 config error, 3 phase-ordering error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import ConfigError, FormatError, InputError, ParameterError, PhaseOrderError
from .pipeline import PHASES, Experiment, resolve_config, set_dotted

COMMANDS = ("gen-data", "train-teachers", "train-combiners", "distill", "quantize",
            "evaluate", "report-complexity", "run-all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenekd",
                                     description="Ensemble-guided distillation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="runs/default", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. --set kd.alpha=0.7")
        p.add_argument("--float64", action="store_true",
                       help="float64 test-precision mode (bitwise-reproducible metrics)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(path=args.config)
        for kv in args.set:
            if "=" not in kv:
                raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
            set_dotted(cfg, *kv.split("=", 1))
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.float64:
            cfg["float64"] = True
        from .pipeline import validate_config
        validate_config(cfg)
        exp = Experiment(cfg, args.out)
        if args.command == "run-all":
            exp.run_all()
        elif args.command == "report-complexity":
            print(json.dumps(exp.report_complexity(), indent=1, sort_keys=True))
        else:
            exp.run_phase(args.command)
        if args.command in PHASES or args.command == "run-all":
            print(f"{args.command}: done ({args.out})")
        return 0
    except (ConfigError, ParameterError, InputError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PhaseOrderError as e:
        print(f"phase-ordering error: {e}", file=sys.stderr)
        return 3
    except (OSError, FormatError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
