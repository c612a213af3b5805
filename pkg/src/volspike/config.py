"""Pipeline configuration: one YAML file, defaults are the reference experiment settings."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import yaml

from .backtest import StrategyConfig, StrategyKind
from .features import EmaParams, TransformMethod, VolatilityParams
from .ingest import FillPolicy, SplitBoundaries
from .model import ModelConfig, Variant
from .train import HyperGrid, TrainConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


# reference transform code per column; vol_future is always code 4
DEFAULT_TRANSFORMS: dict[str, int] = {
    "etom_flow_total": 1, "etom_transactions_count_flow": 1, "etom_flow_mean": 5,
    "mtoe_flow_total": 1, "mtoe_transactions_count_flow": 1, "mtoe_flow_mean": 5,
    "cdd": 1, "sca": 1, "open": 1, "high": 1, "low": 1, "close": 1, "volume": 1,
    "open_interest": 1, "market_cap": 1, "funding_rates": 0, "taker_buy_volume": 1,
    "taker_sell_volume": 1, "taker_buy_ratio": 0, "taker_sell_ratio": 0,
    "long_liquidations": 1, "short_liquidations": 1, "long_liquidations_usd": 1,
    "short_liquidations_usd": 1, "mvrv": 2, "exchange_whale_ratio": 0, "fund_flow_ratio": 0,
    "mpi": 0, "BTCminus": 5, "BTCplus": 5, "USDminus": 5, "USDplus": 5, "ema10": 0,
    "HL_sprd": 3, "CO_sprd": 0, "log_returns": 0,
    "miner_inflow_total": 1, "miner_inflow_top10": 1, "miner_inflow_mean": 3,
    "miner_inflow_mean_ma7": 2, "miner_outflow_total": 1, "miner_outflow_top10": 1,
    "miner_outflow_mean": 3, "miner_outflow_mean_ma7": 1, "miner_addresses_count_inflow": 1,
    "miner_addresses_count_outflow": 1, "miner_transactions_count_inflow": 1,
    "miner_transactions_count_outflow": 1, "miner_minus": 1, "miner_plus": 1,
    "exchange_inflow_total": 1, "exchange_inflow_top10": 1, "exchange_inflow_mean": 3,
    "exchange_inflow_mean_ma7": 2, "exchange_outflow_total": 1, "exchange_outflow_top10": 1,
    "exchange_outflow_mean": 3, "exchange_outflow_mean_ma7": 1,
    "exchange_addresses_count_inflow": 1, "exchange_addresses_count_outflow": 1,
    "exchange_transactions_count_inflow": 1, "exchange_transactions_count_outflow": 1,
    "exchange_minus": 1, "exchange_plus": 1,
}


@dataclass(frozen=True)
class Paths:
    dataset: str = "market.csv"
    tweets: str | None = None
    output_dir: str = "out"


@dataclass(frozen=True)
class FeatureRecipe:
    ema_window: int = 10
    ema_smoothing: float = 2.0
    vol_window: int = 7
    annualization: float = 365.0
    transforms: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_TRANSFORMS))
    inputs: tuple[str, ...] | None = None  # None -> every non-target column


@dataclass(frozen=True)
class GridSettings:
    grid: HyperGrid = field(default_factory=HyperGrid)
    workers: int = 1


@dataclass(frozen=True)
class BacktestSettings:
    initial_capital: float = 10_000.0
    position_fraction: float = 0.05
    fee_rate: float = 0.001
    strategies: tuple[str, ...] = ("buy_low_sell_high", "momentum", "mean_reversion")

    def configs(self, threshold: float) -> dict[str, StrategyConfig]:
        common = dict(
            initial_capital=self.initial_capital,
            position_fraction=self.position_fraction,
            fee_rate=self.fee_rate,
            spike_threshold=threshold,
        )
        out = {"buy_and_hold": StrategyConfig(StrategyKind.BuyAndHold, **common)}
        for s in self.strategies:
            for scaled in (False, True):
                c = StrategyConfig(StrategyKind(s), volatility_scaled=scaled, **common)
                out[c.label] = c
        return out


@dataclass(frozen=True)
class EvalSettings:
    thresholds: tuple[float, ...] = (1.0, 1.1, 1.2, 1.3)
    ablation_baseline: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class PipelineConfig:
    paths: Paths
    splits: SplitBoundaries
    fill: FillPolicy
    features: FeatureRecipe
    model: ModelConfig
    train: TrainConfig
    grid: GridSettings
    backtest: BacktestSettings
    evaluation: EvalSettings
    spike_threshold: float = 1.0
    seed: int = 0
    exchanges: tuple[str, ...] | None = None
    base_dir: Path = field(default=Path("."), compare=False)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.paths.output_dir)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "PipelineConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
        if out is not None:
            cfg = replace(cfg, paths=replace(cfg.paths, output_dir=str(Path(out).resolve())))
        return cfg


# ---------------------------------------------------------------------------
# parsing


def _date(v, where, problems):
    if isinstance(v, dt.date):
        return v
    try:
        return dt.date.fromisoformat(str(v))
    except ValueError:
        problems.append(f"{where}: not an ISO date: {v!r}")
        return None


def _known(section: Mapping, allowed, where, problems):
    for k in section:
        if k not in allowed:
            problems.append(f"{where}.{k}: unknown key")


def _build(cls, raw: Mapping, where: str, problems: list[str], **convert):
    names = {f.name for f in fields(cls)}
    _known(raw, names, where, problems)
    kwargs = {}
    for k, v in raw.items():
        if k in names:
            kwargs[k] = convert[k](v) if k in convert else v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        for msg in str(exc).split("; "):
            problems.append(f"{where}: {msg}")
        return None


def parse_config(data: Mapping[str, Any], base_dir: Path | str = ".") -> PipelineConfig:
    """Validate a config mapping. Raises :class:`ConfigError` listing every problem found."""
    problems: list[str] = []
    data = dict(data or {})
    top = {"paths", "splits", "fill", "features", "model", "train", "grid", "backtest",
           "evaluation", "spike_threshold", "seed", "exchanges"}
    _known(data, top, "config", problems)
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append("seed: must be an integer")
        seed = 0

    paths = _build(Paths, data.get("paths", {}), "paths", problems)

    sp = data.get("splits")
    splits = None
    if not isinstance(sp, Mapping):
        problems.append("splits: required mapping with train_end, val_end, test_end")
    else:
        _known(sp, {"train_end", "val_end", "test_end"}, "splits", problems)
        ds = [_date(sp.get(k), f"splits.{k}", problems) for k in ("train_end", "val_end", "test_end")]
        if all(ds):
            try:
                splits = SplitBoundaries(*ds)
            except ValueError as exc:
                problems.append(f"splits: {exc}")

    fl = data.get("fill", {}) or {}
    _known(fl, {"backfill", "zero"}, "fill", problems)
    try:
        fill = FillPolicy(frozenset(fl.get("backfill", []) or []), frozenset(fl.get("zero", []) or []))
    except ValueError as exc:
        problems.append(f"fill: {exc}")
        fill = None

    fr = dict(data.get("features", {}) or {})
    transforms = dict(DEFAULT_TRANSFORMS)
    transforms.update(fr.pop("transforms", {}) or {})
    for col, code in transforms.items():
        try:
            TransformMethod(code)
        except ValueError:
            problems.append(f"features.transforms.{col}: unknown transform code {code!r}")
    features = _build(
        FeatureRecipe, {**fr, "transforms": transforms}, "features", problems,
        inputs=lambda v: None if v is None else tuple(v),
    )
    if features is not None:
        try:
            EmaParams(features.ema_window, features.ema_smoothing)
            VolatilityParams(features.vol_window, features.annualization)
        except ValueError as exc:
            problems.append(f"features: {exc}")

    md = dict(data.get("model", {}) or {})
    if "variant" in md:
        try:
            Variant(md["variant"])
        except ValueError:
            problems.append(f"model.variant: unknown variant {md['variant']!r}")
            md.pop("variant")
    model = _build(ModelConfig, md, "model", problems)

    tr = dict(data.get("train", {}) or {})
    if "seed" in tr:
        problems.append("train.seed: set the top-level seed instead; every random stream derives from it")
        tr.pop("seed")
    train = _build(TrainConfig, {**tr, "seed": seed}, "train", problems)

    gr = dict(data.get("grid", {}) or {})
    workers = gr.pop("workers", 1)
    grid = _build(HyperGrid, gr, "grid", problems, **{k: tuple for k in ("layers", "heads", "batch_size", "dropout")})
    if not isinstance(workers, int) or workers < 1:
        problems.append("grid.workers: must be a positive integer")
        workers = 1
    if grid is not None and model is not None:
        bad = [h for h in grid.heads if model.model_dim % h]
        if bad:
            problems.append(f"grid.heads: {bad} do not divide model.model_dim={model.model_dim}")

    bt = _build(BacktestSettings, data.get("backtest", {}) or {}, "backtest", problems, strategies=tuple)
    if bt is not None:
        for s in bt.strategies:
            try:
                if StrategyKind(s) is StrategyKind.BuyAndHold:
                    problems.append("backtest.strategies: buy_and_hold is always included")
            except ValueError:
                problems.append(f"backtest.strategies: unknown strategy {s!r}")
        try:
            StrategyConfig(
                initial_capital=bt.initial_capital, position_fraction=bt.position_fraction, fee_rate=bt.fee_rate
            )
        except ValueError as exc:
            problems.append(f"backtest: {exc}")

    ev = _build(EvalSettings, data.get("evaluation", {}) or {}, "evaluation", problems,
                thresholds=lambda v: tuple(float(x) for x in v))

    thr = data.get("spike_threshold", 1.0)
    if not isinstance(thr, (int, float)) or not thr > 0:
        problems.append("spike_threshold: must be a positive number")

    exchanges = data.get("exchanges")
    if exchanges is not None and not exchanges:
        problems.append("exchanges: must be non-empty when given")

    if problems:
        raise ConfigError(problems)
    return PipelineConfig(
        paths=paths, splits=splits, fill=fill, features=features, model=model, train=train,
        grid=GridSettings(grid, workers), backtest=bt, evaluation=ev,
        spike_threshold=float(thr), seed=seed,
        exchanges=tuple(exchanges) if exchanges else None, base_dir=Path(base_dir),
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: YAML syntax error: {exc}"]) from None
    if data is not None and not isinstance(data, Mapping):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return parse_config(data or {}, base_dir=path.parent.resolve())


def config_to_dict(cfg: PipelineConfig) -> dict:
    """Canonical plain-data form (all defaults made explicit)."""
    f = cfg.features
    g = cfg.grid.grid
    return {
        "seed": cfg.seed,
        "paths": {"dataset": cfg.paths.dataset, "tweets": cfg.paths.tweets, "output_dir": cfg.paths.output_dir},
        "splits": {
            "train_end": cfg.splits.train_end.isoformat(),
            "val_end": cfg.splits.val_end.isoformat(),
            "test_end": cfg.splits.test_end.isoformat(),
        },
        "fill": {"backfill": sorted(cfg.fill.backfill_columns), "zero": sorted(cfg.fill.zero_columns)},
        "features": {
            "ema_window": f.ema_window,
            "ema_smoothing": f.ema_smoothing,
            "vol_window": f.vol_window,
            "annualization": f.annualization,
            "transforms": dict(sorted(f.transforms.items())),
            "inputs": list(f.inputs) if f.inputs is not None else None,
        },
        "model": cfg.model.to_dict(),
        "train": {k.name: getattr(cfg.train, k.name) for k in fields(cfg.train) if k.name != "seed"},
        "grid": {
            "layers": list(g.layers), "heads": list(g.heads),
            "batch_size": list(g.batch_size), "dropout": list(g.dropout),
            "workers": cfg.grid.workers,
        },
        "backtest": {
            "initial_capital": cfg.backtest.initial_capital,
            "position_fraction": cfg.backtest.position_fraction,
            "fee_rate": cfg.backtest.fee_rate,
            "strategies": list(cfg.backtest.strategies),
        },
        "evaluation": {
            "thresholds": list(cfg.evaluation.thresholds),
            "ablation_baseline": dict(sorted(cfg.evaluation.ablation_baseline.items())),
        },
        "spike_threshold": cfg.spike_threshold,
        "exchanges": list(cfg.exchanges) if cfg.exchanges else None,
    }


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True, default_flow_style=False)
