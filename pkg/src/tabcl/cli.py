"""Command-line entry point: ``tabcl <subcommand> --config run.yaml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import OUT_ENV, ConfigError, from_dict, load_config, validate, RunConfig
from .pipeline import STAGES, StageError, rerender, run_pipeline
from .report import REPORT_NAME, summary_text


def _apply_overrides(cfg: RunConfig, pairs: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` overrides; values are parsed as YAML scalars."""
    if not pairs:
        return cfg
    raw = cfg.to_dict()
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        node = raw
        *parents, leaf = key.split(".")
        for part in parents:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a config section")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"override {key!r}: unknown key {leaf!r}")
        node[leaf] = yaml.safe_load(value)
    new = from_dict(RunConfig, raw)
    validate(new)
    return new


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="YAML run config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    common.add_argument("--resume", action="store_true",
                        help="reuse stages already completed for this config")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config field, e.g. continual.lam=0")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tabcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    run_all = sub.add_parser("run-all", parents=[common], help="run every stage in order")
    run_all.add_argument("--stage", choices=STAGES, help="stop after this stage")
    rep = sub.add_parser("report", help="print and re-render the report of a finished run")
    rep.add_argument("--out", help=f"run directory (default: ${OUT_ENV})")
    rep.add_argument("--config", help="config whose output directory to use")
    return parser


def _report_command(args) -> int:
    import os
    if args.out:
        out = Path(args.out)
    elif args.config:
        out = Path(load_config(args.config).out)
    elif os.environ.get(OUT_ENV):
        out = Path(os.environ[OUT_ENV])
    else:
        print("report: pass --out, --config or set " + OUT_ENV, file=sys.stderr)
        return 2
    if not (out / REPORT_NAME).is_file():
        print(f"report: no {REPORT_NAME} in {out}", file=sys.stderr)
        return 2
    report = rerender(out)
    print(summary_text(report), end="")
    return 0 if report["status"] == "complete" else 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return _report_command(args)
    try:
        cfg = _apply_overrides(load_config(args.config, seed=args.seed, out=args.out), args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run-all":
        stages = STAGES[: STAGES.index(args.stage) + 1] if args.stage else STAGES
    else:
        stages = (args.command,)
    try:
        report = run_pipeline(cfg, stages=stages, resume=args.resume)
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # partial report already written
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(summary_text(report), end="")
    print(f"report written to {Path(cfg.out) / REPORT_NAME}")
    done = all(report["stages"][s]["status"] == "completed" for s in stages)
    return 0 if done else 1


if __name__ == "__main__":
    sys.exit(main())
