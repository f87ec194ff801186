"""Command line entry point: ``neighborfl {run,pretrain,chart,compare}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from neighborfl.config import ConfigError, SimConfig, load_config

log = logging.getLogger("neighborfl")

# flag -> config field; values are parsed with the field's declared type
_OVERRIDES = {
    "mode": str, "removal_policy": str, "nu": int, "learner": str, "rounds": int, "seed": int,
    "epochs": int, "n_in": int, "n_out": int, "tau_first": int, "tau_rest": int, "max_data_size": int,
    "hidden": int, "layers": int, "dropout": float, "lr": float, "rho": float, "eps": float,
    "jobs": int, "label": str, "summary_last": int,
    "metadata_csv": str, "stream_csv": str, "pretrain_csv": str, "checkpoint_dir": str, "output_dir": str,
}


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML or JSON config (a run manifest also works)")
    for name, typ in _OVERRIDES.items():
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
    radius = p.add_mutually_exclusive_group()
    radius.add_argument("--radius-miles", type=float, default=None)
    radius.add_argument("--radius-km", type=float, default=None)
    p.add_argument("--normalize", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--reset-optimizer", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--devices", default=None, help="comma-separated subset of device ids")


def build_config(args: argparse.Namespace) -> SimConfig:
    base = load_config(args.config) if args.config else SimConfig()
    changes = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k) is not None}
    if args.radius_miles is not None:
        changes.update(radius=args.radius_miles, radius_unit="miles")
    if args.radius_km is not None:
        changes.update(radius=args.radius_km, radius_unit="km")
    if args.normalize is not None:
        changes["normalize"] = args.normalize
    if args.reset_optimizer is not None:
        changes["reset_optimizer"] = args.reset_optimizer
    if args.devices:
        changes["devices"] = tuple(d.strip() for d in args.devices.split(",") if d.strip())
    try:
        return dataclasses.replace(base, **changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neighborfl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate all rounds and write logs and summaries")
    _add_config_args(p_run)

    p_pre = sub.add_parser("pretrain", help="train per-device initial models on historical data")
    _add_config_args(p_pre)

    p_chart = sub.add_parser("chart", help="prediction-vs-truth SVGs for a finished run")
    p_chart.add_argument("run_dir", type=Path)
    p_chart.add_argument("--rounds", default=None, help="FIRST:LAST (default: last 24 rounds)")
    p_chart.add_argument("--device", action="append", default=None)
    p_chart.add_argument("--out", type=Path, default=None)

    p_cmp = sub.add_parser("compare", help="MSE tables and smoothed-MSE charts across runs")
    p_cmp.add_argument("run_dirs", type=Path, nargs="+")
    p_cmp.add_argument("--out", type=Path, required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")

    from neighborfl import runner
    from neighborfl.data import StreamError
    from neighborfl.geo import RegistryError
    from neighborfl.learner import ArchError, TrainingError

    try:
        if args.command == "run":
            config = build_config(args)
            result = runner.run(config)
            print(f"wrote {len(result.logs)} rounds for {len(result.device_ids)} devices to {result.output_dir}")
        elif args.command == "pretrain":
            config = build_config(args)
            paths = runner.pretrain(config)
            print(f"wrote {len(paths)} checkpoints to {config.checkpoint_dir}")
        elif args.command == "chart":
            paths = runner.chart_run(args.run_dir, args.rounds, args.device, args.out)
            print(f"wrote {len(paths)} chart(s)")
        elif args.command == "compare":
            paths = runner.compare_runs(args.run_dirs, args.out)
            print(f"wrote {len(paths)} file(s) to {args.out}")
    except (ConfigError, StreamError, RegistryError, ArchError, TrainingError, runner.HarnessError,
            FileNotFoundError) as exc:
        print(f"neighborfl: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
