"""Command-line entry point: ``run``, ``reproduce`` and ``sweep``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .harness import (
    EXIT_ASSERTION,
    EXIT_OK,
    ConfigError,
    classify_error,
    run_config_file,
    sweep,
)
from .reproduce import TARGETS, reproduce


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pbgdfree", description="Penalty-based bilevel optimization experiments.")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--seedless", action="store_true",
                    help="accepted for compatibility; nothing here is random")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment from a config file")
    p.add_argument("config")

    p = sub.add_parser("reproduce", help="regenerate a desk-scale result")
    p.add_argument("target", choices=sorted(TARGETS))

    p = sub.add_parser("sweep", help="run a config once per value of one numeric key")
    p.add_argument("config")
    p.add_argument("--param", required=True, help="key such as solver.gamma (bare names mean solver.<name>)")
    p.add_argument("--values", required=True, help="comma-separated values")
    return ap


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    context = ""
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            res = run_config_file(args.config, args.out)
            print(f"wrote {res.output_dir} ({len(res.records)} records)")
            return EXIT_OK
        if args.command == "reproduce":
            out = os.path.join(args.out or "out", args.target)
            context = f"reproduce {args.target}: "
            results = reproduce(args.target, out)
            for a in results:
                print(a.line())
            return EXIT_OK if all(a.passed for a in results) else EXIT_ASSERTION
        values = [v for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("--values is empty")
        code, path = sweep(args.config, args.param, values, args.out)
        print(f"wrote {path}")
        if code:
            print("error: at least one sweep run failed; see the summary", file=sys.stderr)
        return code
    except Exception as exc:
        return _fail(classify_error(exc), context + str(exc))


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
