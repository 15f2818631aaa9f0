"""Command-line entry point: ``fedrecsim run <config> [--seed-override S] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import ConfigurationError, DataFormatError
from .experiment import ConfigError, expand_matrix, load_config_file, parse_config, report_degradation, run_experiment
from .model import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _run(args) -> int:
    try:
        raw = load_config_file(args.config)
        expanded = expand_matrix(raw)
        configs = []
        for name, mapping in expanded:
            cfg = parse_config(mapping, name=name)
            if args.seed_override is not None:
                cfg.seeds = [args.seed_override]
            configs.append(cfg)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    base = Path(args.out) if args.out else None
    for cfg in configs:
        if base is None:
            out = Path(cfg.output_dir) / cfg.name
        else:
            out = base / cfg.name if len(configs) > 1 else base
        try:
            summary = run_experiment(cfg, out)
        except (ConfigError, ConfigurationError, DataFormatError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except NumericError as exc:
            print(f"numeric fault in {cfg.name}: {exc}; partial artifacts left in {out}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"{cfg.name}: {json.dumps(summary['mean'], sort_keys=True)} -> {out}")
    return EXIT_OK


def _degradation(args) -> int:
    base = json.loads(Path(args.baseline).read_text())
    attacked = json.loads(Path(args.attacked).read_text())
    for key, value in report_degradation(base, attacked).items():
        print(f"{key}: {value:.2f}%")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="fedrecsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config (YAML or JSON)")
    run.add_argument("config")
    run.add_argument("--seed-override", type=int, default=None)
    run.add_argument("--out", default=None, help="output directory (defaults to output_dir/name)")
    run.set_defaults(func=_run)

    deg = sub.add_parser("degradation", help="relative metric drop between two summary.json files")
    deg.add_argument("baseline")
    deg.add_argument("attacked")
    deg.set_defaults(func=_degradation)

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
