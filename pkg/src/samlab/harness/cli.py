"""Command-line entry point.

Subcommands:
  run <config.toml>   execute one experiment and write its artifacts
  verify              run the verification suite, write report.json
  list                show the experiment tags and what each one checks

Exit codes: 0 success, 1 configuration error, 2 aborted run,
3 verification failure.
"""
from __future__ import annotations

import argparse
import sys
import traceback

from .config import EXPERIMENT_TAGS, ConfigError, load_config
from .experiments import run_experiment
from .runio import sha256_bytes
from .verify import verify

_DESCRIPTIONS = {
    "escape-toy": "deterministic sharp-well escape contrast across step rules",
    "noise-toy": "shared-noise path-length comparison of the probing rules",
    "envelope-sweep": "scalar-map envelopes vs the exact two-cycle amplitude",
    "amplification-sweep": "envelope ratio vs inverse root average curvature",
    "whitening-check": "direct vs whitened displacement recursion",
    "damping-check": "stationary variance/motion of the noise-driven mode",
    "selection-sweep": "two-well occupancy vs the renewal-reward ratio",
    "llqr-mlp-check": "learned preconditioner vs exact inverse / damped Newton",
    "transfer-diagnostic": "optimizer steps vs the closed-form recursion",
}


def _cmd_run(args) -> int:
    try:
        cfg, raw = load_config(args.config)
        cfg = cfg.with_overrides(out_dir=args.out, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        artifacts = run_experiment(cfg, sha256_bytes(raw), jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception:  # noqa: BLE001 - surface the abort, nonzero status
        print(f"run aborted for {cfg.tag}:", file=sys.stderr)
        traceback.print_exc()
        return 2
    for path in artifacts:
        print(path)
    return 0


def _cmd_verify(args) -> int:
    try:
        all_passed, report_path = verify(out_dir=args.out or "verify_out")
    except Exception:  # noqa: BLE001
        print("verification aborted:", file=sys.stderr)
        traceback.print_exc()
        return 2
    print(report_path)
    if not all_passed:
        print("verification failed; see report", file=sys.stderr)
        return 3
    return 0


def _cmd_list(_args) -> int:
    width = max(len(t) for t in EXPERIMENT_TAGS)
    for tag in EXPERIMENT_TAGS:
        print(f"{tag:<{width}}  {_DESCRIPTIONS[tag]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samlab",
        description="Desk-scale laboratory for metric-aware "
                    "sharpness-aware optimization.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment config")
    p_run.add_argument("config", help="path to a TOML experiment config")
    p_run.add_argument("--out", default=None, help="output directory override")
    p_run.add_argument("--seed", type=int, default=None,
                       help="replace the config's seed list with one seed")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="worker processes for independent runs")
    p_run.set_defaults(func=_cmd_run)

    p_verify = sub.add_parser("verify",
                              help="run every closed-form cross-check")
    p_verify.add_argument("--out", default=None,
                          help="directory for report.json (default verify_out)")
    p_verify.add_argument("--jobs", type=int, default=1,
                          help="accepted for symmetry; checks run serially")
    p_verify.set_defaults(func=_cmd_verify)

    p_list = sub.add_parser("list", help="list experiment tags")
    p_list.set_defaults(func=_cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
