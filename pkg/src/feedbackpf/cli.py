"""Command-line entry point.

    feedbackpf run --config exp.yaml [--seed N] [--out DIR]
    feedbackpf gain-bench --config bench.yaml [--out DIR]
    feedbackpf validate --config exp.yaml

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import ConfigError, ModelError, NumericalError, SingularGeometryError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

log = logging.getLogger("feedbackpf")


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feedbackpf", description="Feedback particle filter experiments")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a truth path and run the configured filters")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=_seed, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="output directory (default: config output_dir)")

    bench = sub.add_parser("gain-bench", help="static comparison of gain solvers on a fixed density")
    bench.add_argument("--config", required=True)
    bench.add_argument("--seed", type=_seed, default=None)
    bench.add_argument("--out", default=None)

    val = sub.add_parser("validate", help="check a config file against the schema")
    val.add_argument("--config", required=True)
    return parser


def _load(path, need):
    cfg = load_config(path)
    if need == "run" and not cfg.filters:
        raise ConfigError("no filters configured; use gain-bench for a gain_bench-only config", field="filters")
    if need == "gain-bench" and cfg.gain_bench is None:
        raise ConfigError("config has no gain_bench section", field="gain_bench")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    from .harness import gain_bench, run_experiment

    try:
        cfg = _load(args.config, args.command)
        if args.command == "validate":
            print(f"{args.config}: ok")
            return EXIT_OK
        if args.command == "run":
            log.info("running %d filter(s)", len(cfg.filters))
            result = run_experiment(cfg, out_dir=args.out, seed=args.seed)
        else:
            result = gain_bench(cfg, out_dir=args.out, seed=args.seed)
        out = args.out or cfg.output_dir
        print(f"wrote {out}/metrics.json")
        log.info("metrics: %s", sorted(result.metrics))
        return EXIT_OK
    except (ConfigError, ModelError, SingularGeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        where = ""
        if getattr(exc, "context", None):
            where = " [" + ", ".join(f"{k}={v}" for k, v in exc.context.items()) + "]"
        elif getattr(exc, "step", None) is not None:
            where = f" [step={exc.step}]"
        print(f"numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
