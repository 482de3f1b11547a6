"""``seqrec prepare|train|evaluate|ablate|recommend --config FILE``.

Exit status is 0 on success. Failures print one line to stderr,
``error: <kind>: <message>``, and exit with status 2 (bad config or
input) or 1 (anything else).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import METHODS, ConfigError, describe_schema, load_config

log = logging.getLogger("seqrec")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqrec", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter,
                                     epilog="config keys:\n" + describe_schema())
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="experiment config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    add("prepare", "tokenize, split and write the prepared artifacts")
    p = add("train", "train one or all methods on the training users")
    p.add_argument("--method", choices=METHODS, help="default: every method in the config")
    p = add("evaluate", "score methods and a random ranker on the validation users")
    p.add_argument("--method", choices=METHODS, action="append", help="repeatable; default: config methods")
    p = add("ablate", "drop the most popular items, retrain and re-evaluate")
    p.add_argument("--top-fraction", type=float, help="override the config top_fraction")
    p = add("recommend", "write top-K lists")
    p.add_argument("--method", choices=METHODS, default="seq")
    p.add_argument("--k", type=int, help="list length (default: config recommend_k)")
    p.add_argument("--users", type=Path, help="file of user ids, one per line (default: validation users)")
    return parser


def run(args) -> None:
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    if args.command == "prepare":
        prep = pipeline.cmd_prepare(cfg)
        print(f"prepared {len(prep.sequences)} users into {prep.root}")
    elif args.command == "train":
        produced = pipeline.cmd_train(cfg, [args.method] if args.method else None)
        print(f"trained {args.method or ', '.join(cfg.methods)}: {len(produced)} files")
    elif args.command == "evaluate":
        reports = pipeline.cmd_evaluate(cfg, args.method)
        for r in reports:
            cols = " ".join(f"MAP@{k}={r.map_at[k]:.4f}" for k in cfg.ks)
            print(f"{r.system:<7} {cols} NDCG={r.ndcg:.4f} users={r.evaluated_users}")
    elif args.command == "ablate":
        if args.top_fraction is not None and not 0.0 <= args.top_fraction <= 1.0:
            raise ConfigError("--top-fraction must be in [0, 1]")
        reports, removed = pipeline.cmd_ablate(cfg, top_fraction=args.top_fraction)
        print(f"removed {len(removed)} items: {' '.join(sorted(removed))}")
        for r in reports:
            print(f"{r.system:<7} MAP@{cfg.ks[0]}={r.map_at[cfg.ks[0]]:.4f} NDCG={r.ndcg:.4f}")
    elif args.command == "recommend":
        if args.k is not None and args.k < 1:
            raise ConfigError("--k must be >= 1")
        users = None
        if args.users is not None:
            if not args.users.is_file():
                raise ConfigError(f"user list not found: {args.users}")
            users = [line.strip() for line in args.users.read_text().splitlines() if line.strip()]
        path, unknown = pipeline.cmd_recommend(cfg, args.method, args.k, users)
        if unknown:
            print(f"skipped {len(unknown)} unknown users: {' '.join(unknown[:10])}", file=sys.stderr)
        print(path)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except (ConfigError, pipeline.PipelineError, CheckpointError) as exc:
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single-line report is the contract
        print(f"error: {type(exc).__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
