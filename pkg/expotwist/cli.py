"""Command line: ``run <config>``, ``check <config>``, ``oracle <benchmark>``.

Exit codes: 0 pass, 1 check failure, 2 config error, 3 runtime error.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from expotwist.config import settings
from expotwist.core.errors import ConfigError, ExpoTwistError
from expotwist.core.oracles import BENCHMARKS, benchmark_table
from expotwist.core.utils import format_float
from expotwist.logging import log_config
from expotwist.schemas.run_config import parse_config
from expotwist.services.experiment import EXIT_CONFIG_ERROR, EXIT_PASS, EXIT_RUNTIME_ERROR, check, run_experiment

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=settings.app_name,
                                     description="Monte Carlo toolkit for the exponential twist of a path measure")
    parser.add_argument("--log-level", default=settings.log_level, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--no-log-file", action="store_true", help="log to the console only")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the pipelines enabled in a config")
    run.add_argument("config", type=Path)
    run.add_argument("--output-dir", type=Path, help="overrides run.output_dir")
    run.add_argument("--seed", type=int, help="overrides run.seed")

    chk = sub.add_parser("check", help="run the invariant suites only")
    chk.add_argument("config", type=Path)
    chk.add_argument("--output-dir", type=Path)
    chk.add_argument("--seed", type=int)

    oracle = sub.add_parser("oracle", help="print closed-form benchmark values")
    oracle.add_argument("name", choices=BENCHMARKS)
    return parser


def _load(args):
    try:
        text = args.config.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}") from e
    config = parse_config(text)
    overrides = {}
    if args.output_dir is not None:
        overrides["output_dir"] = str(args.output_dir)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = config.model_copy(update={"run": config.run.model_copy(update=overrides)})
    return config, text


def _print_oracle(name: str):
    for key, value in benchmark_table(name).items():
        print(f"{key},{format_float(value)}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    log_config.setup_logging(args.log_level, to_file=not args.no_log_file)

    if args.command == "oracle":
        _print_oracle(args.name)
        return EXIT_PASS

    try:
        config, text = _load(args)
        runner = run_experiment if args.command == "run" else check
        outcome = runner(config, config_text=text)
    except ConfigError as e:
        logger.error(f"Config error in {args.config}: {e}")
        return EXIT_CONFIG_ERROR
    except (ExpoTwistError, ValueError) as e:
        logger.error(f"Run failed: {e}", exc_info=True)
        return EXIT_RUNTIME_ERROR

    failed = [r for r in outcome.results if not r.passed]
    for r in failed:
        print(f"FAIL {r.pipeline}/{r.name}: value={r.value} reference={r.reference} {r.detail}", file=sys.stderr)
    print(f"{len(outcome.results) - len(failed)}/{len(outcome.results)} checks passed, "
          f"results in {outcome.output_dir}")
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
