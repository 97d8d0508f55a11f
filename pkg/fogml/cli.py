"""Command line: ``fogml run`` and ``fogml sweep``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, List, Optional, Sequence

from fogml.core.exceptions import FogMLError
from fogml.sim.settings import ExperimentConfig
from fogml.sim.simulator import Simulator, sweep

logger = logging.getLogger("fogml")


def parse_values(raw: str) -> List[Any]:
    """Comma-separated JSON scalars; bare words are kept as strings."""
    values: List[Any] = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(json.loads(part))
        except json.JSONDecodeError:
            values.append(part)
    return values


def _format_value(value: Any) -> str:
    return value if isinstance(value, str) else json.dumps(value)


def _load(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config = config.with_override("master_seed", args.seed)
    if args.output_dir is not None:
        config = config.with_override("output_dir", args.output_dir)
    return config


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args)
    with Simulator(config, cache_dir=args.cache_dir) as sim:
        result = sim.run()
    out = result.write(config.output_dir)
    final = result.final or {}
    acc = final.get("test_acc")
    print(f"{config.protocol}: {result.rounds} rounds, test_acc={acc} -> {out}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    config = _load(args)
    values = parse_values(args.values)
    result = sweep(config, args.param, values, cache_dir=args.cache_dir)
    root = Path(config.output_dir)
    for value, run in zip(result.values, result.runs):
        run.write(root / f"{args.param}={_format_value(value)}")
    result.write(root)
    print(result.to_dataframe().to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fogml", description="Fog ML protocol simulator"
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="experiment config (JSON)")
        p.add_argument("--output-dir", default=None, help="overrides output_dir")
        p.add_argument("--seed", type=int, default=None, help="overrides master_seed")
        p.add_argument(
            "--cache-dir", default=None, help="memoise runs in this directory"
        )

    run = sub.add_parser("run", help="run one experiment")
    common(run)
    run.set_defaults(func=cmd_run)

    sw = sub.add_parser("sweep", help="run one experiment per value of a config field")
    common(sw)
    sw.add_argument(
        "--param", required=True, help="dotted config key, e.g. training.tau"
    )
    sw.add_argument(
        "--values", required=True, help="comma-separated values, e.g. 1,2,5"
    )
    sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(
        level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    try:
        return args.func(args)
    except FogMLError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # pragma: no cover
        logger.exception("unexpected failure")
        error = {"error": "internal", "message": str(exc), "detail": {}}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
