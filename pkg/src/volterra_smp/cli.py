"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 a solver did not converge or a
simulation diverged, 4 anything unexpected.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .errors import InvalidArgument, NonConvergence, SimulationDiverged
from .runner import ORACLES, VERBS, compare, run
from .scenario import load_scenario, shipped_scenarios


def _scenario_path(value: str) -> Path:
    path = Path(value)
    if path.exists():
        return path
    shipped = shipped_scenarios()
    if value in shipped:
        return shipped[value]
    raise InvalidArgument(f"no scenario file {value!r} and no shipped scenario of that name "
                          f"(shipped: {', '.join(shipped)})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volterra-smp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--scenario", required=True, help="scenario YAML file or the name of a shipped scenario")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: ./out/<verb>)")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        p.add_argument("--paths", type=int, default=None, help="override the number of paths")
        p.add_argument("--threads", type=int, default=1, help="simulation workers; never changes results")
        if verb == "solve-lq":
            p.add_argument("--oracle", choices=ORACLES, default="none")
        if verb == "check-smp":
            p.add_argument("--candidates", type=Path, default=None,
                           help="CSV of candidate controls, one column each, one row per node")
    p = sub.add_parser("compare", help="diff two summary.json files of the same scenario")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--force", action="store_true", help="compare even if the scenario hashes differ")
    sub.add_parser("scenarios", help="list the shipped scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "scenarios":
            for name, path in shipped_scenarios().items():
                print(f"{name}\t{path}")
            return 0
        if args.verb == "compare":
            print(json.dumps(compare(args.a, args.b, args.force), indent=2, sort_keys=True))
            return 0
        sc = load_scenario(_scenario_path(args.scenario)).with_overrides(args.seed, args.paths)
        out = args.out or Path("out") / args.verb
        start = time.perf_counter()
        run(sc, args.verb, out, workers=args.threads, oracle=getattr(args, "oracle", "none"),
            candidates=getattr(args, "candidates", None))
        print(f"wrote {out} ({time.perf_counter() - start:.2f} s)", file=sys.stderr)
        return 0
    except InvalidArgument as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NonConvergence, SimulationDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        history = getattr(exc, "history", None)
        if history:
            print(f"history: {history}", file=sys.stderr)
        return 3
    except Exception as exc:  # noqa: BLE001 - last-resort mapping onto the documented exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
