"""``volspike`` command line.

Every subcommand takes ``--config``; ``--seed`` and ``--out`` override the
file. On failure a single JSON object is written to stderr::

    {"status": "error", "category": "config", "errors": ["splits.val_end: ..."]}

and the process exits with the category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import torch

from . import __version__, pipeline
from .backtest import BacktestError
from .config import ConfigError, load_config
from .evaluation import MetricError
from .features import FeatureError
from .ingest import DatasetNotFoundError, IngestError
from .model import CheckpointError, ModelError
from .train import TrainingError

logger = logging.getLogger("volspike")

EXIT_CODES = {
    "internal": 1,
    "config": 2,
    "input": 3,
    "data": 4,
    "training": 5,
    "checkpoint": 6,
}

COMMANDS = ("parse-tweets", "prepare", "train", "grid", "evaluate", "ablate", "backtest", "all")


def categorize(exc: BaseException) -> str:
    # order matters: several of these share a ValueError base
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (DatasetNotFoundError, FileNotFoundError)):
        return "input"
    if isinstance(exc, CheckpointError):
        return "checkpoint"
    if isinstance(exc, TrainingError):
        return "training"
    if isinstance(exc, (IngestError, FeatureError, MetricError, BacktestError, ModelError)):
        return "data"
    return "internal"


def _run(args, cfg) -> list[Path]:
    cmd = args.command
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else None
    preds = Path(args.predictions) if getattr(args, "predictions", None) else None
    if cmd == "parse-tweets":
        return pipeline.parse_tweets(cfg)
    if cmd == "prepare":
        return pipeline.prepare(cfg)
    if cmd == "train":
        return pipeline.run_train(cfg)
    if cmd == "grid":
        return pipeline.run_grid(cfg)
    if cmd == "evaluate":
        return pipeline.evaluate(cfg, predictions=preds, checkpoint=ckpt)
    if cmd == "ablate":
        return pipeline.ablate(cfg, checkpoint=ckpt)
    if cmd == "backtest":
        return pipeline.run_backtests(cfg, predictions=preds, checkpoint=ckpt)
    if cmd == "all":
        written = []
        if cfg.paths.tweets is not None:
            written += pipeline.parse_tweets(cfg)
        written += pipeline.prepare(cfg)
        written += pipeline.run_train(cfg)
        written += pipeline.run_grid(cfg)
        written += pipeline.evaluate(cfg)
        written += pipeline.ablate(cfg)
        written += pipeline.run_backtests(cfg)
        return written
    raise AssertionError(cmd)


def _fixture(out: Path) -> list[Path]:
    from importlib import resources

    out.mkdir(parents=True, exist_ok=True)
    written = []
    src = resources.files("volspike") / "data"
    for name in ("fixture_market.csv", "fixture_tweets.tsv", "fixture_config.yaml"):
        with resources.as_file(src / name) as p:
            shutil.copyfile(p, out / name)
        written.append(out / name)
    return written


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volspike", description="Next-day BTC volatility-spike forecasting pipeline.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "parse-tweets": "whale-alert corpus -> daily whale flow CSV",
        "prepare": "merge, indicators, transforms, labels -> feature CSV",
        "train": "train one model -> checkpoint and history",
        "grid": "hyper-parameter grid -> leaderboard",
        "evaluate": "test-split metrics and threshold sweep",
        "ablate": "feature-ablation attribution CSV",
        "backtest": "trading strategies -> trades, equity, metrics",
        "all": "run every stage in order",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="pipeline YAML file")
        p.add_argument("--seed", type=int, help="override the root seed")
        p.add_argument("--out", help="override the output directory")
        if name in ("evaluate", "ablate", "backtest"):
            p.add_argument("--checkpoint", help="model checkpoint (default: <out>/checkpoint.bin)")
        if name in ("evaluate", "backtest"):
            p.add_argument("--predictions", help="CSV with date,prediction columns instead of a model")
    fx = sub.add_parser("fixture", help="copy the bundled synthetic fixture and its config to a directory")
    fx.add_argument("--out", required=True)
    return ap


def _fail(category: str, errors: list[str]) -> int:
    json.dump({"status": "error", "category": category, "errors": errors}, sys.stderr, sort_keys=True)
    sys.stderr.write("\n")
    return EXIT_CODES[category]


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "fixture":
        written = _fixture(Path(args.out))
        print(json.dumps({"status": "ok", "artifacts": [str(p) for p in written]}))
        return 0

    torch.use_deterministic_algorithms(True)
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
        written = _run(args, cfg)
    except ConfigError as exc:
        return _fail("config", exc.problems)
    except Exception as exc:  # noqa: BLE001 - reported with a category
        cat = categorize(exc)
        if cat == "internal":
            logger.exception("unexpected failure")
        return _fail(cat, [f"{type(exc).__name__}: {exc}"])
    print(json.dumps({"status": "ok", "command": args.command, "artifacts": [str(p) for p in written]}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
