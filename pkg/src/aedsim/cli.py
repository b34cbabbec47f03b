"""Command-line entry point.

    aedsim run --config FILE [--seed N] [--out DIR]
    aedsim report LOG [LOG ...] [--format text|json]
    aedsim validate-config FILE

Human-facing progress goes to stderr; machine output (paths, tables, JSON)
goes to stdout or files. Exit codes: 0 success, 1 configuration error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .config import config_from_dict, parse_config
from .errors import ConfigurationError
from .harness import format_report_text, report, run_scenario


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aedsim")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None, help="override master_seed")
    run_p.add_argument("--out", default=None, help="override output_dir")

    rep_p = sub.add_parser("report", help="summarize one or more log.json files")
    rep_p.add_argument("logs", nargs="+")
    rep_p.add_argument("--format", choices=("text", "json"), default="text")

    val_p = sub.add_parser("validate-config", help="parse a config and echo it resolved")
    val_p.add_argument("config")
    return parser


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.out is not None:
        overrides["output_dir"] = args.out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
    print(
        f"running {cfg.scenario} for {cfg.max_epochs} epochs "
        f"(seed {cfg.master_seed}) -> {cfg.output_dir}",
        file=sys.stderr,
    )
    log = run_scenario(cfg)
    print(
        f"done: {len(log.rows)} epochs, "
        f"final clean {log.summary['final_window_clean_mean']:.4f}",
        file=sys.stderr,
    )
    print(f"{cfg.output_dir}/log.json")
    return 0


def _cmd_report(args) -> int:
    rep = report(args.logs)
    if args.format == "json":
        json.dump(rep, sys.stdout, indent=2)
        sys.stdout.write("\n")
    else:
        sys.stdout.write(format_report_text(rep))
    return 0


def _cmd_validate(args) -> int:
    cfg = parse_config(args.config)
    # re-parse the resolved form: materialized defaults must round-trip
    resolved = cfg.to_dict()
    config_from_dict(resolved)
    json.dump(resolved, sys.stdout, indent=2)
    sys.stdout.write("\n")
    print("config OK", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "report":
            return _cmd_report(args)
        return _cmd_validate(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
