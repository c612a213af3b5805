"""End-to-end pipeline stages. Each stage reads its inputs from disk and writes its artifacts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import backtest as bt
from .config import PipelineConfig, config_to_dict
from .evaluation import (
    MetricError,
    confusion_at_threshold,
    correlation_stats,
    feature_ablation,
    rmse,
    spike_metrics,
    sweep_to_csv,
    threshold_sweep,
)
from .features import (
    EmaParams,
    SpikeRule,
    TransformMethod,
    VolatilityParams,
    apply_transform,
    candle_spreads,
    ema,
    label_spikes,
    log_returns,
    realized_volatility,
)
from .ingest import (
    FeatureFrame,
    FillPolicy,
    IngestError,
    fill_missing,
    load_dataset,
    merge_on_date,
    save_dataset,
    split_by_date,
)
from .model import load_checkpoint, predict_windows, save_checkpoint
from .train import coordinate_name, final_position_windows, grid_search, train
from .whale_parser import (
    DEFAULT_EXCHANGES,
    FLOW_COLUMNS,
    ExchangeRegistry,
    aggregate_daily,
    flows_to_frame,
    iter_corpus,
    parse_corpus,
)

logger = logging.getLogger(__name__)

TARGET = "vol_future"
# columns carried in the feature table but never fed to the model
AUX_COLUMNS = ("vol_future", "ret_future", "spike_future", "price_close")
DERIVED_BACKFILL = ("ema10", "log_returns", "vol", "HL_sprd", "CO_sprd")

WHALE_CSV = "whale_daily.csv"
PARSE_STATS = "parse_stats.json"
FEATURES_CSV = "features.csv"
CHECKPOINT = "checkpoint.bin"
HISTORY_CSV = "history.csv"
LEADERBOARD_CSV = "leaderboard.csv"
GRID_DIR = "grid"
PREDICTIONS_CSV = "predictions.csv"
METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
SWEEP_CSV = "threshold_sweep.csv"
ABLATION_CSV = "ablation.csv"
TRADES_CSV = "trades.csv"
EQUITY_CSV = "equity.csv"
BACKTEST_CSV = "backtest_metrics.csv"


class MissingArtifactError(FileNotFoundError):
    pass


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: Path, made_by: str) -> Path:
    if not path.is_file():
        raise MissingArtifactError(f"{path} not found; run `volspike {made_by}` first")
    return path


# ---------------------------------------------------------------------------
# parse-tweets / prepare


def _registry(cfg: PipelineConfig) -> ExchangeRegistry:
    return ExchangeRegistry(cfg.exchanges or DEFAULT_EXCHANGES)


def whale_flows(cfg: PipelineConfig, dates) -> tuple[FeatureFrame, dict]:
    corpus = cfg.resolve(cfg.paths.tweets)
    if corpus is None:
        raise IngestError("paths.tweets is not set")
    if not corpus.is_file():
        raise MissingArtifactError(f"tweet corpus not found: {corpus}")
    records = ((d, text) for _, d, text in iter_corpus(corpus))
    transfers, stats = parse_corpus(records, _registry(cfg))
    return flows_to_frame(aggregate_daily(transfers, dates)), stats.as_dict()


def parse_tweets(cfg: PipelineConfig) -> list[Path]:
    """Corpus -> one row of whale flows per dataset date."""
    market = load_dataset(cfg.resolve(cfg.paths.dataset))
    flows, stats = whale_flows(cfg, market.dates)
    out = cfg.output_dir
    save_dataset(flows, out / WHALE_CSV)
    _write_json(out / PARSE_STATS, stats)
    logger.info("parsed %d lines, accepted %d", stats["lines"], stats["accepted"])
    return [out / WHALE_CSV, out / PARSE_STATS]


def _shift_back(x: np.ndarray) -> np.ndarray:
    """Value of tomorrow at today's row; the last row becomes missing."""
    out = np.full_like(x, np.nan)
    out[:-1] = x[1:]
    return out


def build_features(market: FeatureFrame, cfg: PipelineConfig, whales: FeatureFrame | None = None) -> FeatureFrame:
    """Indicators, transforms, next-day labels and fill, in that order.

    Rows without a next-day target (the last row and any warm-up rows) are dropped.
    """
    fr = cfg.features
    if "close" not in market.columns:
        raise IngestError("dataset has no 'close' column")
    referenced = set(cfg.fill.backfill_columns) | set(cfg.fill.zero_columns)
    close = np.asarray(market["close"])
    n = len(market)
    if np.isnan(close).any():
        raise IngestError("'close' has missing values; prices cannot be filled")

    derived: dict[str, np.ndarray] = {}
    # the moving average tracks the transformed close, so it lives on the same scale
    ema_base = apply_transform(close, fr.transforms.get("close", 0))
    derived["ema10"] = ema(ema_base, EmaParams(fr.ema_window, fr.ema_smoothing))
    if all(c in market.columns for c in ("open", "high", "low")):
        derived["HL_sprd"], derived["CO_sprd"] = candle_spreads(market["open"], market["high"], market["low"], close)
    ret = np.full(n, np.nan)
    if n >= 2:
        ret[1:] = log_returns(close)
    derived["log_returns"] = ret
    vol = np.full(n, np.nan)
    vp = VolatilityParams(fr.vol_window, fr.annualization)
    if n - 1 >= vp.window:
        vol[vp.window :] = realized_volatility(ret[1:], vp)
    vol = apply_transform(vol, TransformMethod.POW14)
    derived["vol"] = vol

    frame = market.with_columns(**derived)
    if whales is not None:
        frame = merge_on_date(frame, whales)

    cols = {
        name: values if name == "vol" else apply_transform(values, fr.transforms.get(name, 0))
        for name, values in frame.columns.items()
    }
    cols["price_close"] = close
    vol_future = _shift_back(vol)
    ret_future = _shift_back(ret)
    spike = np.full(n, np.nan)
    known = ~np.isnan(vol_future) & ~np.isnan(ret_future)
    spike[known] = label_spikes(vol_future[known], ret_future[known], SpikeRule(cfg.spike_threshold))
    cols.update(vol_future=vol_future, ret_future=ret_future, spike_future=spike)
    frame = FeatureFrame(frame.dates, cols, TARGET)

    keep = known
    if not keep.any():
        raise IngestError(
            f"no row has a next-day volatility target; need more than vol_window={vp.window} + 1 rows"
        )
    first, last = int(np.argmax(keep)), len(keep) - int(np.argmax(keep[::-1]))
    frame = frame.rows(first, last)

    unknown = sorted(c for c in referenced if c not in frame.columns)
    if unknown:
        raise IngestError(f"fill policy references columns not in the dataset: {unknown}")
    # explicit config entries take precedence over the defaults for derived and flow columns
    explicit_b, explicit_z = set(cfg.fill.backfill_columns), set(cfg.fill.zero_columns)
    backfill = explicit_b | ({c for c in DERIVED_BACKFILL if c in frame.columns} - explicit_z)
    zero = explicit_z | ((set(FLOW_COLUMNS) if whales is not None else set()) - explicit_b)
    policy = FillPolicy(frozenset(backfill), frozenset(zero))
    return fill_missing(frame, policy)


def prepare(cfg: PipelineConfig) -> list[Path]:
    market = load_dataset(cfg.resolve(cfg.paths.dataset))
    whales = None
    if cfg.paths.tweets is not None:
        whales, _ = whale_flows(cfg, market.dates)
    frame = build_features(market, cfg, whales)
    inputs = input_columns(cfg, frame)
    logger.info("feature table: %d rows, %d model inputs", len(frame), len(inputs))
    out = cfg.output_dir / FEATURES_CSV
    save_dataset(frame, out)
    return [out]


def input_columns(cfg: PipelineConfig, frame: FeatureFrame) -> list[str]:
    if cfg.features.inputs is not None:
        missing = [c for c in cfg.features.inputs if c not in frame.columns]
        if missing:
            raise IngestError(f"features.inputs not in the feature table: {missing}")
        bad = [c for c in cfg.features.inputs if c in AUX_COLUMNS]
        if bad:
            raise IngestError(f"features.inputs may not include label columns: {bad}")
        return list(cfg.features.inputs)
    return [c for c in frame.names if c not in AUX_COLUMNS]


# ---------------------------------------------------------------------------
# train / grid


def load_features(cfg: PipelineConfig) -> FeatureFrame:
    frame = load_dataset(_require(cfg.output_dir / FEATURES_CSV, "prepare"), TARGET)
    return frame


def _splits(cfg: PipelineConfig):
    frame = load_features(cfg)
    tr, va, te = split_by_date(frame, cfg.splits)
    if not len(va) or not len(te):
        raise IngestError("validation and test splits must both be non-empty")
    return frame, tr, va, te


def _ckpt_meta(cfg, inputs, tc, hist, train_frame) -> dict:
    means = train_frame.matrix(inputs).mean(axis=0)
    return {
        "inputs": list(inputs),
        "target": TARGET,
        "train_config": asdict(tc),
        "best_epoch": hist.best_epoch,
        "stopped_epoch": hist.stopped_epoch,
        "best_val_rmse": hist.best_val_loss,
        "train_means": [float(m) for m in means],
    }


def run_train(cfg: PipelineConfig) -> list[Path]:
    _, tr, va, _ = _splits(cfg)
    inputs = input_columns(cfg, tr)
    model, hist = train(cfg.model, cfg.train, tr, va, inputs, TARGET)
    out = cfg.output_dir
    save_checkpoint(out / CHECKPOINT, model, _ckpt_meta(cfg, inputs, cfg.train, hist, tr))
    hist.write_csv(out / HISTORY_CSV)
    return [out / CHECKPOINT, out / HISTORY_CSV]


def run_grid(cfg: PipelineConfig) -> list[Path]:
    _, tr, va, _ = _splits(cfg)
    inputs = input_columns(cfg, tr)
    res = grid_search(
        cfg.grid.grid, cfg.model, cfg.train, tr, va, inputs, TARGET, workers=cfg.grid.workers,
    )
    out = cfg.output_dir
    res.write_leaderboard(out / LEADERBOARD_CSV)
    written = [out / LEADERBOARD_CSV]
    for mc, tc, model, hist in res.points:
        path = out / GRID_DIR / f"{coordinate_name(mc, tc)}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, model, _ckpt_meta(cfg, inputs, tc, hist, tr))
        written.append(path)
    best = out / "grid_best.bin"
    save_checkpoint(best, res.model, _ckpt_meta(cfg, inputs, res.train_config, res.history, tr))
    return written + [best]


# ---------------------------------------------------------------------------
# evaluate / ablate / backtest


def _model(cfg: PipelineConfig, checkpoint: Path | None):
    path = checkpoint or _require(cfg.output_dir / CHECKPOINT, "train")
    return load_checkpoint(path)


def test_predictions(cfg: PipelineConfig, checkpoint: Path | None = None) -> tuple[FeatureFrame, np.ndarray]:
    """Final-position forecasts for every test-split row (context drawn from earlier rows)."""
    frame, tr, va, te = _splits(cfg)
    model, meta = _model(cfg, checkpoint)
    history = frame.rows(0, len(tr) + len(va))
    X, _, rows = final_position_windows(te, meta["inputs"], TARGET, model.cfg.seq_len, context=history)
    pred = predict_windows(model, X)[:, -1]
    return te.rows(int(rows[0]), len(te)), pred


def read_predictions(path: Path, frame: FeatureFrame) -> tuple[FeatureFrame, np.ndarray]:
    """Align an external ``date,prediction`` CSV to ``frame`` (only dates present in both)."""
    got = load_dataset(path)
    if "prediction" not in got.columns:
        raise IngestError(f"{path}: needs a 'prediction' column")
    pos = {d: i for i, d in enumerate(got.dates)}
    idx = [i for i, d in enumerate(frame.dates) if d in pos]
    if not idx:
        raise IngestError(f"{path}: no dates overlap the test split")
    if idx != list(range(idx[0], idx[-1] + 1)):
        raise IngestError(f"{path}: predictions must cover a contiguous run of dates")
    sub = frame.rows(idx[0], idx[-1] + 1)
    pred = np.array([got["prediction"][pos[d]] for d in sub.dates])
    if np.isnan(pred).any():
        raise IngestError(f"{path}: missing prediction values")
    return sub, pred


def _predictions(cfg, predictions: Path | None, checkpoint: Path | None):
    if predictions is not None:
        _, _, _, te = _splits(cfg)
        return read_predictions(predictions, te)
    return test_predictions(cfg, checkpoint)


def evaluate(cfg: PipelineConfig, predictions: Path | None = None, checkpoint: Path | None = None) -> list[Path]:
    te, pred = _predictions(cfg, predictions, checkpoint)
    truth = te[TARGET]
    ret = te["ret_future"]
    flags = te["spike_future"] > 0.5
    counts = confusion_at_threshold(pred, ret, flags, cfg.spike_threshold)
    sm = spike_metrics(counts)
    metrics = {
        "rows": len(te),
        "first_date": te.dates[0].isoformat(),
        "last_date": te.dates[-1].isoformat(),
        "rmse": rmse(pred, truth),
        "threshold": cfg.spike_threshold,
        **asdict(counts),
        **asdict(sm),
    }
    try:
        r2, pearson, spearman = correlation_stats(pred, truth)
        metrics.update(r2=r2, pearson=pearson, spearman=spearman)
    except MetricError as exc:
        logger.warning("correlation statistics undefined: %s", exc)
        metrics.update(r2=None, pearson=None, spearman=None)

    out = cfg.output_dir
    with (out / PREDICTIONS_CSV).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "prediction", "truth", "ret_future", "spike_future"])
        for d, p, t, r, s in zip(te.dates, pred, truth, ret, flags):
            w.writerow([d.isoformat(), repr(float(p)), repr(float(t)), repr(float(r)), int(s)])
    _write_json(out / METRICS_JSON, metrics)
    with (out / METRICS_CSV).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in sorted(metrics):
            v = metrics[k]
            w.writerow([k, "" if v is None else (repr(v) if isinstance(v, float) else v)])
    sweep_to_csv(threshold_sweep(pred, ret, flags, cfg.evaluation.thresholds), out / SWEEP_CSV)
    return [out / PREDICTIONS_CSV, out / METRICS_JSON, out / METRICS_CSV, out / SWEEP_CSV]


def ablate(cfg: PipelineConfig, checkpoint: Path | None = None) -> list[Path]:
    frame, tr, va, te = _splits(cfg)
    model, meta = _model(cfg, checkpoint)
    inputs = meta["inputs"]
    baseline = dict(zip(inputs, meta["train_means"]))
    unknown = sorted(set(cfg.evaluation.ablation_baseline) - set(inputs))
    if unknown:
        raise IngestError(f"evaluation.ablation_baseline names unknown inputs: {unknown}")
    baseline.update(cfg.evaluation.ablation_baseline)
    history = frame.rows(0, len(tr) + len(va))
    X, _, _ = final_position_windows(te, inputs, TARGET, model.cfg.seq_len, context=history)
    report = feature_ablation(model, X, inputs, [baseline[c] for c in inputs])
    out = cfg.output_dir / ABLATION_CSV
    report.write_csv(out)
    return [out]


def run_backtests(cfg: PipelineConfig, predictions: Path | None = None, checkpoint: Path | None = None) -> list[Path]:
    te, pred = _predictions(cfg, predictions, checkpoint)
    # today's realized return: yesterday's ret_future row, or today's log_returns column
    full = load_features(cfg)
    start = full.index_of(te.dates[0])
    closes = np.asarray(te["price_close"])
    prev = full["price_close"][start - 1] if start > 0 else closes[0]
    ret_today = np.log(closes / np.concatenate([[prev], closes[:-1]]))
    rows = {}
    trades, equity = [], []
    for label, sc in cfg.backtest.configs(cfg.spike_threshold).items():
        log, curve = bt.run_backtest(closes, ret_today, pred, sc, te.dates)
        rows[label] = bt.portfolio_metrics(curve, log)
        trades += [(label, t) for t in log]
        equity += [(label, d, v, u) for d, v, u in zip(curve.dates, curve.values, curve.units)]
    out = cfg.output_dir
    with (out / TRADES_CSV).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "date", "side", "units", "price", "fee", "cash_flow"])
        for label, t in trades:
            w.writerow([label, t.date.isoformat(), t.side, repr(t.units), repr(t.price), repr(t.fee), repr(t.cash_flow)])
    with (out / EQUITY_CSV).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "date", "equity", "units"])
        for label, d, v, u in equity:
            w.writerow([label, d.isoformat(), repr(float(v)), repr(float(u))])
    bt.write_metrics_csv(rows, out / BACKTEST_CSV)
    return [out / TRADES_CSV, out / EQUITY_CSV, out / BACKTEST_CSV]


def write_resolved_config(cfg: PipelineConfig) -> Path:
    path = cfg.output_dir / "resolved_config.json"
    _write_json(path, config_to_dict(cfg))
    return path
