"""``bench <experiment-id> --config <path> --out <dir> [--seed S] [--repeat R] [--jobs J]``

Exit codes: 0 success, 2 config error, 3 unrecoverable cell failure.
Recoverable solver failures are recorded in the CSV and do not change the
exit code.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import ConfigError
from .config import EXPERIMENTS, load_config
from .experiments import run_experiment, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_CELL = 0, 2, 3

log = logging.getLogger("odegrad.bench")


class _Parser(argparse.ArgumentParser):
    # bad usage is reported as a config error (exit 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bench", description="Run a gradient-accuracy / NFE experiment and write CSV.")
    p.add_argument("experiment", help=f"one of {', '.join(EXPERIMENTS)}")
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--repeat", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.experiment, args.config, seed=args.seed, repeat=args.repeat,
                          jobs=args.jobs, out_dir=args.out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"bench: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"bench: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    log.info("running %s with seeds %s", cfg.experiment, cfg.seeds)
    result = run_experiment(cfg)
    path = cfg.out_dir / f"{cfg.experiment}.csv"
    write_csv(result, path)
    print(path)
    bad = result.unrecoverable
    if bad:
        for row in bad:
            print(f"bench: cell failed: {row['status']}", file=sys.stderr)
        return EXIT_CELL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
