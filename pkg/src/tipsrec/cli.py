"""Command-line entry point.

Subcommands map one-to-one onto the pipelines: ingest, simulate, train,
eval, ablate, analyze, print-config. ``TIPSREC_LOG`` sets verbosity.
Exit codes: 0 ok, 1 user error (bad config, missing files, malformed
input), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback

from . import pipeline
from .config import RunConfig
from .data import ConfigError, DataCorruptionError, ParseError


class UserErrorParser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; remap to the user-error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = UserErrorParser(prog="tipsrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, needs_config=True):
        p = sub.add_parser(name, help=help_text)
        if needs_config:
            p.add_argument("--config", required=False, help="key = value config file (defaults when omitted)")
        return p

    add("ingest", "parse a dataset and report its statistics")
    add("simulate", "generate a biased-exposure world and its oracle files")
    add("train", "train the configured mode and write a checkpoint")
    p_eval = add("eval", "evaluate a checkpoint under the sampled-negatives protocol")
    p_eval.add_argument("--checkpoint", help="checkpoint prefix (defaults to the trained one in out_dir)")
    p_eval.add_argument("--stage", choices=("val", "test"), default="test")
    add("ablate", "train and compare every ablation variant under one seed")
    p_an = add("analyze", "per-user propensity-gap analysis vs the static estimate")
    p_an.add_argument("--checkpoint", help="checkpoint prefix (untrained model when absent)")
    add("print-config", "print the fully-resolved canonical configuration")
    return parser


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.from_file(args.config)
    return RunConfig()


def _dispatch(args) -> int:
    cfg = _load_config(args)
    if args.command == "print-config":
        print(cfg.to_text(), end="")
        return 0
    if args.command == "ingest":
        stats = pipeline.run_ingest(cfg)
        print(json.dumps(stats, sort_keys=True, indent=2))
        return 0
    if args.command == "simulate":
        summary = pipeline.run_simulate(cfg)
        print(json.dumps(summary, sort_keys=True, indent=2))
        return 0
    if args.command == "train":
        _, summary = pipeline.run_train(cfg)
        print(json.dumps(summary, sort_keys=True, indent=2))
        return 0
    if args.command == "eval":
        _, text = pipeline.run_eval(cfg, prefix=args.checkpoint, stage=args.stage)
        print(text, end="")
        return 0
    if args.command == "ablate":
        payload = pipeline.run_ablate(cfg)
        print(json.dumps(payload, sort_keys=True, indent=2))
        return 0
    if args.command == "analyze":
        summary = pipeline.run_analyze(cfg, prefix=args.checkpoint)
        print(json.dumps(summary, sort_keys=True, indent=2))
        return 0
    raise AssertionError(f"unhandled command {args.command!r}")


USER_ERRORS = (ConfigError, ParseError, DataCorruptionError, FileNotFoundError, ValueError)


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("TIPSREC_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
