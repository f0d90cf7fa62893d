"""Command line entry point.

    sfae run --config cfg.json        train/evaluate the method x seed matrix
    sfae ablation --config cfg.json   feature-layer ablation
    sfae report <dir>                 rebuild tables and figures from cells
    sfae verify <dir> [--rerun N]     check config hashes, optionally retrain

Exit codes: 0 success, 1 some cells failed or verification found problems,
2 invalid configuration or arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment
from .exceptions import ConfigError, SfaeError

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("run", "ablation"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--output-dir")
        s.add_argument("--workers", type=int)
    s = sub.add_parser("report")
    s.add_argument("directory")
    s = sub.add_parser("verify")
    s.add_argument("directory")
    s.add_argument("--rerun", type=int, default=0, help="retrain the first N cells and compare")
    return p


def _print_summary(result) -> None:
    for method, rep in result["reports"].items():
        row = "  ".join(f"{m}={v['mean']:.3f}±{v['std']:.3f}" for m, v in rep.summary().items())
        print(f"{method:28s} {row}")
    for f in result["failures"]:
        print(f"FAILED {f['method']} seed {f['seed']}: {f['error']}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command in ("run", "ablation"):
            cfg = experiment.load_config(args.config, output_dir=args.output_dir, workers=args.workers)
            runner = experiment.run_ablation if args.command == "ablation" else experiment.run_experiment
            result = runner(cfg)
            _print_summary(result)
            if "ablation" in result:
                print(json.dumps(result["ablation"]["ranking"], indent=2))
            return EXIT_FAILED if result["failures"] else EXIT_OK
        if args.command == "report":
            result = experiment.report(args.directory)
            _print_summary(result)
            return EXIT_FAILED if result["failures"] else EXIT_OK
        ok, problems = experiment.verify(args.directory, args.rerun)
        for line in problems:
            print(line, file=sys.stderr)
        print("verified" if ok else f"{len(problems)} problem(s)")
        return EXIT_OK if ok else EXIT_FAILED
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SfaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
