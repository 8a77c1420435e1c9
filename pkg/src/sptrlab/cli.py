"""Command line entry point: ``sptrlab run | sweep | selftest``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .exceptions import ConfigError, NonFiniteLossError


def _error_line(exc: BaseException) -> str:
    info = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError) and exc.key is not None:
        info["key"] = exc.key
    if isinstance(exc, NonFiniteLossError):
        info.update(epoch=exc.epoch, term=exc.term)
    return json.dumps(info)


def _cmd_run(args) -> int:
    from .experiment import run_experiment

    payload = run_experiment(args.config, args.out, seed=args.seed, task=args.task)
    print(json.dumps({"out": args.out, **payload["final"], "flags": payload["flags"]}))
    return 0


def _cmd_sweep(args) -> int:
    from .experiment import sweep

    rows = sweep(args.grid, args.out, jobs=args.jobs)
    print(json.dumps({"out": args.out, "runs": len(rows)}))
    return 0


def _cmd_selftest(args) -> int:
    from .acceptance import ALL_CHECKS, run_all

    checks = ALL_CHECKS
    if args.only:
        checks = [c for c in ALL_CHECKS if any(key in c.__name__ for key in args.only)]
    results = []
    for check in checks:
        res = check()
        print(res.line(), flush=True)
        results.append(res)
    hard_fail = [r.name for r in results if not r.passed and not r.soft]
    print(json.dumps({"passed": not hard_fail, "failed": hard_fail,
                      "flagged": [r.name for r in results if not r.passed and r.soft]}))
    return 1 if hard_fail else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sptrlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train and evaluate one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--task", choices=("fewshot", "base2novel"), default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("sweep", help="run every point of a grid file")
    p.add_argument("--grid", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("selftest", help="run the acceptance checks")
    p.add_argument("--only", nargs="*", help="substring filter on check names")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, NonFiniteLossError, FileNotFoundError, ValueError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
