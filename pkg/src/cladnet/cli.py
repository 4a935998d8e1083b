"""``cladnet`` command line: prepare, train, ablate, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_override
from .continual import STRATEGIES
from .dataio import ParseError, prepare, save_cache

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("cladnet")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config (flags override it)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="BLOCK.KEY=VALUE",
        help="override any config value, e.g. run.epochs=10 (value parsed as JSON)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cladnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="window, split, standardize and cache a dataset")
    _add_config_args(p)
    p.add_argument("--dataset", choices=("synthetic", "pamap2", "dsa"))
    p.add_argument("--root", help="dataset directory (pamap2, dsa)")
    p.add_argument("--out", help="cache directory (default: run.cache)")

    p = sub.add_parser("train", help="run one strategy over the subject stream")
    _add_config_args(p)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable; default: run.seeds)")
    p.add_argument("--cache", help="prepared cache (default: run.cache)")
    p.add_argument("--out", help="output directory (default: run.out_dir)")
    p.add_argument("--no-checkpoints", action="store_true", help="skip per-task checkpoints")

    p = sub.add_parser("ablate", help="run an ablation grid")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=experiment.ABLATION_AXES)
    p.add_argument("--strategies", help="comma-separated strategies for the labels axis")
    p.add_argument("--seed", type=int, action="append")
    p.add_argument("--cache")
    p.add_argument("--out")

    p = sub.add_parser("report", help="aggregate results into tables and curve CSVs")
    p.add_argument("--runs", required=True, help="directory searched for summary.csv/accuracy.csv")
    p.add_argument("--out", required=True)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    overrides = [parse_override(o) for o in args.overrides]
    if getattr(args, "dataset", None):
        overrides.insert(0, (["dataset", "kind"], args.dataset))
    if getattr(args, "root", None):
        overrides.append((["dataset", "root"], args.root))
    if getattr(args, "strategy", None):
        overrides.append((["strategy", "kind"], args.strategy))
    if getattr(args, "seed", None):
        overrides.append((["run", "seeds"], list(args.seed)))
    if getattr(args, "cache", None):
        overrides.append((["run", "cache"], args.cache))
    if getattr(args, "out", None) and args.command != "prepare":
        overrides.append((["run", "out_dir"], args.out))
    cfg = load_config(args.config, overrides)
    try:
        cfg.strategy.resolved()
    except ValueError as exc:
        raise ConfigError(f"strategy: {exc}") from exc
    return cfg


def cmd_prepare(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out or cfg.run.cache)
    data = prepare(cfg.dataset)
    checksum = save_cache(out, data, cfg.dataset)
    print(f"wrote {len(data.train)} train / {len(data.test)} test windows to {out} (checksum {checksum[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    rows = experiment.train(cfg, cfg.run.cache, out, checkpoints=not args.no_checkpoints)
    for row in rows:
        print("strategy={} seed={} FA={:.4f} FM={:.4f} LA={:.4f}".format(row[0], row[1], *map(float, row[2:5])))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    strategies = [s for s in (args.strategies or "").split(",") if s] or None
    rows = experiment.ablate(cfg, cfg.run.cache, cfg.run.out_dir, args.axis, strategies)
    for row in rows:
        print("{} / {}: FA={:.4f} FM={:.4f} LA={:.4f}".format(row[0], row[1], *map(float, row[5:8])))
    return EXIT_OK


def cmd_report(args) -> int:
    table, curves = experiment.report(args.runs, args.out)
    for row in table:
        print(
            "{}: n={} FA={:.4f}±{:.4f} FM={:.4f}±{:.4f} LA={:.4f}±{:.4f}".format(row[0], row[1], *map(float, row[2:]))
        )
    print(f"{len(curves)} curve points written to {Path(args.out) / 'curves.csv'}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"cladnet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"cladnet: parse error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"cladnet: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
