"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
artifact, 4 compute budget exceeded, 5 numerical failure, 1 anything else.
Failures print a single machine-readable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .config import load_config
from .errors import (
    BudgetExceededError,
    ConfigurationError,
    DataFormatError,
    MissingArtifactError,
    NumericalError,
    OwrfError,
)
from .pipeline import cmd_discover, cmd_eval, cmd_generate, cmd_stream, cmd_train

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_BUDGET = 4
EXIT_NUMERICAL = 5


def _exit_code(exc: OwrfError) -> int:
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG
    if isinstance(exc, (MissingArtifactError, DataFormatError)):
        return EXIT_MISSING
    if isinstance(exc, BudgetExceededError):
        return EXIT_BUDGET
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owrf",
        description="Open-world RF recognition pipeline: generate data, train, "
        "evaluate, stream with novel-class discovery, or cluster a saved buffer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="pipeline config file (INI)")
        p.add_argument("--out", required=True, help="run output directory")
        p.add_argument("--seed", type=int, help="override the config root seed")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("generate", help="synthesize the I/Q dataset and manifests")
    common(p)

    p = sub.add_parser("train", help="train the base encoder and fit class gates")
    common(p)
    p.add_argument("--data", required=True, help="dataset directory (from generate)")

    p = sub.add_parser("eval", help="open-set evaluation of a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="eval", choices=("eval", "train"))

    p = sub.add_parser("stream", help="streaming session with discovery and update")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("discover", help="cluster a saved unknown-buffer file")
    common(p)
    p.add_argument("--embeddings", required=True, help=".npy matrix of embeddings")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, root_seed=args.seed)
        if args.command == "generate":
            cmd_generate(config, args.out)
        elif args.command == "train":
            cmd_train(config, args.data, args.out)
        elif args.command == "eval":
            cmd_eval(config, args.checkpoint, args.data, args.out, split=args.split)
        elif args.command == "stream":
            cmd_stream(config, args.checkpoint, args.data, args.out)
        elif args.command == "discover":
            cmd_discover(config, args.embeddings, args.out)
    except OwrfError as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return _exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
