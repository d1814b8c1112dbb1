"""Command line entry point.

Subcommands: train, eval, export, config. Exit codes: 0 success, 1 config or
argument validation failure, 2 runtime failure. Relative output paths are
resolved under $QUADGPS_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, default_config, dump_config, load_config


def _resolve_output(path: str) -> Path:
    root = os.environ.get("QUADGPS_OUTPUT_ROOT")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _cmd_train(args) -> int:
    config = load_config(args.config)
    out_dir = _resolve_output(args.output or config.output_dir)
    from .harness import run_training

    reports = run_training(config, out_dir)
    final = reports[-1]
    print(f"training complete: {len(reports)} iterations, "
          f"{sum(r.crash_count for r in reports)} total crashes, "
          f"final policy loss {final.policy_loss:.6g}")
    print(f"artifacts in {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    config = load_config(args.config)
    if args.runs is not None:
        config.test = dataclasses.replace(config.test, runs=args.runs)
    if args.scenario is not None:
        config.test = dataclasses.replace(config.test, scenario=args.scenario)
    from .harness import run_eval

    out = _resolve_output(args.out) if args.out else None
    report = run_eval(args.checkpoint, config, out_path=out)
    print(f"flight duration over {len(report.durations_s)} runs: "
          f"{report.mean_duration_s:.2f} +/- {report.sd_duration_s:.2f} s")
    for d, c in zip(report.durations_s, report.crash_types):
        print(f"  {d:8.2f} s  {c}")
    return 0


def _cmd_export(args) -> int:
    from .harness import export_run

    written = export_run(_resolve_output(args.run_dir), args.what)
    for path in written:
        print(path)
    return 0


def _cmd_config(args) -> int:
    if args.defaults:
        print(dump_config(default_config()), end="")
        return 0
    if args.validate:
        load_config(args.validate)
        print(f"{args.validate}: valid")
        return 0
    print("nothing to do: pass --defaults or --validate PATH", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadgps",
        description="Train and evaluate sensor-driven quadrotor flight policies")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("-c", "--config", required=True)
    p_train.add_argument("-o", "--output", default=None,
                         help="override the config's output directory")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="fly a trained policy from observations")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("-c", "--config", required=True)
    p_eval.add_argument("--runs", type=int, default=None)
    p_eval.add_argument("--scenario", default=None)
    p_eval.add_argument("--out", default=None, help="write the report as JSON")
    p_eval.set_defaults(func=_cmd_eval)

    p_export = sub.add_parser("export", help="flatten run artifacts to CSV")
    p_export.add_argument("--run-dir", required=True)
    p_export.add_argument("--what", choices=("trajectories", "metrics", "all"),
                          default="all")
    p_export.set_defaults(func=_cmd_export)

    p_config = sub.add_parser("config", help="inspect configuration")
    p_config.add_argument("--defaults", action="store_true",
                          help="print the full default config")
    p_config.add_argument("--validate", default=None, metavar="PATH")
    p_config.set_defaults(func=_cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO,
                            format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logging.getLogger(__name__).exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
