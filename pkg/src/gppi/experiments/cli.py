"""Command line entry point ``gppi``.

``gppi run [CONFIG] [--preset NAME] [--method gppi|as|both] [--seed N] [--out DIR]``
``gppi list-presets``
``gppi compare REPORT_A REPORT_B``

Exit status: 0 when every run converged, 2 when a run was flagged as not
converged, 1 on errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import GPPIError
from .config import load_config
from .presets import DESCRIPTIONS, PRESETS
from .runner import compare_methods, run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gppi", description="GP policy iteration experiments")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config", nargs="?", help="YAML config file (optional with --preset)")
    run.add_argument("--preset", help="named preset; overrides the config's preset")
    run.add_argument("--method", choices=("gppi", "as", "as_newton", "both"))
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory")

    sub.add_parser("list-presets", help="list the named presets")

    cmp_ = sub.add_parser("compare", help="compare two JSON reports")
    cmp_.add_argument("report_a")
    cmp_.add_argument("report_b")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "list-presets":
            for name in PRESETS:
                print(f"{name:28s} {DESCRIPTIONS.get(name, '')}")
            return 0
        if args.command == "compare":
            print(json.dumps(compare_methods(args.report_a, args.report_b), indent=2, sort_keys=True))
            return 0
        if args.config is None and args.preset is None:
            print("error: give a config file or --preset", file=sys.stderr)
            return 1
        cfg = load_config(args.config, args.preset)
        reports = run_experiment(cfg, method=args.method, out=args.out, seed=args.seed)
    except (GPPIError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for r in reports:
        lam = f" lambda={r.lam:.8f}" if r.lam is not None else ""
        err = r.final_error_m if r.final_error_m == r.final_error_m else r.final_error_u
        print(f"{r.problem} {r.method}: converged={r.converged} iterations={r.iterations}{lam} "
              f"final_error={err:.3e} seconds={r.timings.get('total', 0.0):.2f}"
              + (f" ({r.message})" if r.message else ""))
    return 0 if all(r.converged for r in reports) else 2


if __name__ == "__main__":
    sys.exit(main())
