"""Long-only daily backtests driven by next-day volatility forecasts.

Orders execute at the day's close with no slippage. A buy spends a notional
amount of cash; the fee is taken out of that notional, so
``units = notional * (1 - fee_rate) / price``. A sale receives
``units * price * (1 - fee_rate)``. Positions still open on the last day are
liquidated at its close.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class BacktestError(ValueError):
    pass


class StrategyKind(str, enum.Enum):
    BuyAndHold = "buy_and_hold"
    BuyLowSellHigh = "buy_low_sell_high"
    Momentum = "momentum"
    MeanReversion = "mean_reversion"


class Order(str, enum.Enum):
    Buy = "buy"
    SellAll = "sell_all"
    CloseNext = "close_next"
    NoOp = "none"


@dataclass(frozen=True)
class StrategyConfig:
    kind: StrategyKind = StrategyKind.BuyAndHold
    initial_capital: float = 10_000.0
    position_fraction: float = 0.05
    fee_rate: float = 0.001
    volatility_scaled: bool = False
    spike_threshold: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        errs = self.problems()
        if errs:
            raise BacktestError("; ".join(errs))

    def problems(self) -> list[str]:
        errs = []
        if not 0 < self.position_fraction <= 1:
            errs.append("position_fraction must be in (0, 1]")
        if not 0 <= self.fee_rate < 1:
            errs.append("fee_rate must be in [0, 1)")
        if not self.initial_capital > 0:
            errs.append("initial_capital must be positive")
        if not self.spike_threshold > 0:
            errs.append("spike_threshold must be positive")
        return errs

    @property
    def label(self) -> str:
        return f"({'S' if self.volatility_scaled else 'U'}) {self.kind.value}"


@dataclass(frozen=True)
class Trade:
    date: object
    side: str  # "buy" | "sell"
    units: float
    price: float
    fee: float
    cash_flow: float  # signed change of cash


@dataclass
class TradeLog:
    trades: list[Trade] = field(default_factory=list)

    def __len__(self):
        return len(self.trades)

    def __iter__(self):
        return iter(self.trades)

    def round_trips(self) -> list[float]:
        """Net USD result of each flat-to-flat cycle (fees included)."""
        # every sale liquidates the whole position
        out = []
        pnl = 0.0
        for t in self.trades:
            pnl += t.cash_flow
            if t.side == "sell":
                out.append(pnl)
                pnl = 0.0
        return out

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "side", "units", "price", "fee", "cash_flow"])
            for t in self.trades:
                d = t.date.isoformat() if hasattr(t.date, "isoformat") else t.date
                w.writerow([d, t.side, repr(t.units), repr(t.price), repr(t.fee), repr(t.cash_flow)])


@dataclass
class EquityCurve:
    dates: list
    values: np.ndarray  # cash + units * close after the day's strategy trades
    units: np.ndarray  # BTC held after the day's strategy trades
    initial_capital: float

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["date", "equity", "units"])
            for d, v, u in zip(self.dates, self.values, self.units):
                d = d.isoformat() if hasattr(d, "isoformat") else d
                w.writerow([d, repr(float(v)), repr(float(u))])


@dataclass(frozen=True)
class PortfolioMetrics:
    time_in_market: float
    sharpe: float
    max_drawdown: float
    kelly: float
    daily_var_95: float
    pnl: float
    sharpe_undefined: bool = False

    COLUMNS = ("time_in_market", "sharpe", "max_drawdown", "kelly", "daily_var_95", "pnl")

    def row(self) -> list[float]:
        return [getattr(self, c) for c in self.COLUMNS]


# ---------------------------------------------------------------------------


def _two_day_trend(r: np.ndarray, t: int) -> int:
    """+1 if the last two moves were both up, -1 if both down, else 0."""
    if t < 2:
        return 0
    if r[t] > r[t - 1] and r[t - 1] > r[t - 2]:
        return 1
    if r[t] < r[t - 1] and r[t - 1] < r[t - 2]:
        return -1
    return 0


def generate_signals(kind: StrategyKind | str, pred_vol, log_ret, threshold: float = 1.0) -> list[Order]:
    """One order per day from the day's forecast (for tomorrow) and today's log-return."""
    kind = StrategyKind(kind)
    v = np.asarray(pred_vol, dtype=float)
    r = np.asarray(log_ret, dtype=float)
    if v.shape != r.shape:
        raise BacktestError(f"length mismatch: {v.shape} vs {r.shape}")
    n = v.size
    orders = [Order.NoOp] * n
    if kind is StrategyKind.BuyAndHold:
        if n:
            orders[0] = Order.Buy
        return orders
    if kind is StrategyKind.BuyLowSellHigh:
        for t in range(n):
            if v[t] >= threshold:
                orders[t] = Order.SellAll
            elif t >= 1 and r[t] < r[t - 1]:
                orders[t] = Order.Buy
        return orders
    want = 1 if kind is StrategyKind.Momentum else -1
    for t in range(n):
        if t and orders[t - 1] is Order.Buy:
            orders[t] = Order.CloseNext
        elif v[t] >= threshold and _two_day_trend(r, t) == want:
            orders[t] = Order.Buy
    return orders


def position_size(capital: float, cfg: StrategyConfig, pred_vol: float = 1.0) -> float:
    if capital <= 0:
        return 0.0
    notional = capital * cfg.position_fraction
    if cfg.volatility_scaled:
        notional *= pred_vol
    return notional


def run_backtest(closes, log_ret, pred_vol, cfg: StrategyConfig, dates: Sequence | None = None):
    """Simulate ``cfg`` over aligned daily series. Returns ``(TradeLog, EquityCurve)``.

    Buy-and-hold invests all capital on day 0; the other strategies buy
    ``position_size`` of the remaining cash per signal and may pyramid.
    """
    c = [float(x) for x in closes]
    v = np.asarray(pred_vol, dtype=float)
    r = np.asarray(log_ret, dtype=float)
    if not (len(c) == v.size == r.size) or v.ndim != 1 or r.ndim != 1:
        raise BacktestError("closes, log_ret and pred_vol must be aligned")
    if not c:
        raise BacktestError("empty series")
    if not all(x > 0 for x in c):
        raise BacktestError("closes must be positive")
    if dates is None:
        dates = list(range(len(c)))
    dates = list(dates)
    orders = generate_signals(cfg.kind, v, r, cfg.spike_threshold)
    f = cfg.fee_rate
    cash = cfg.initial_capital
    units = 0.0
    log = TradeLog()
    values = np.empty(len(c))
    held = np.empty(len(c))

    def sell(t):
        nonlocal cash, units
        gross = units * c[t]
        fee = gross * f
        log.trades.append(Trade(dates[t], "sell", units, c[t], fee, gross - fee))
        cash += gross - fee
        units = 0.0

    for t, order in enumerate(orders):
        if order is Order.Buy:
            if cfg.kind is StrategyKind.BuyAndHold:
                notional = cash
            else:
                notional = position_size(cash, cfg, float(v[t]))
            if notional <= 0 or notional > cash:
                logger.info("skipping buy on %s: notional %.2f, cash %.2f", dates[t], notional, cash)
            else:
                fee = notional * f
                bought = (notional - fee) / c[t]
                log.trades.append(Trade(dates[t], "buy", bought, c[t], fee, -notional))
                cash -= notional
                units += bought
        elif order in (Order.SellAll, Order.CloseNext) and units > 0:
            sell(t)
        held[t] = units
        values[t] = cash + units * c[t]
    if units > 0:
        sell(len(c) - 1)
        values[-1] = cash
    return log, EquityCurve(dates, values, held, cfg.initial_capital)


def portfolio_metrics(equity: EquityCurve, trades: TradeLog, annualization: float = 365.0) -> PortfolioMetrics:
    e = np.asarray(equity.values, dtype=float)
    if e.size < 2:
        raise BacktestError("need at least two equity points")
    pnl = (e[-1] / equity.initial_capital - 1) * 100
    max_dd = float(min(0.0, np.min(e / np.maximum.accumulate(e) - 1) * 100))
    rets = e[1:] / e[:-1] - 1
    sd = rets.std(ddof=1) if rets.size > 1 else 0.0
    undefined = not sd > 0
    sharpe = 0.0 if undefined else float(rets.mean() / sd * math.sqrt(annualization))
    var95 = float(min(0.0, np.percentile(rets, 5) * 100))
    tim = float(np.mean(np.asarray(equity.units) > 0) * 100)
    return PortfolioMetrics(
        time_in_market=tim,
        sharpe=sharpe,
        max_drawdown=max_dd,
        kelly=kelly_criterion(trades.round_trips()),
        daily_var_95=var95,
        pnl=float(pnl),
        sharpe_undefined=undefined,
    )


def kelly_criterion(results: Sequence[float]) -> float:
    """``(W - (1 - W) / R) * 100`` from per-trade results, W the win fraction, R mean win / mean loss."""
    res = np.asarray(results, dtype=float)
    if res.size == 0:
        return 0.0
    wins = res[res > 0]
    losses = -res[res <= 0]
    W = wins.size / res.size
    if wins.size == 0:
        return -100.0
    if losses.size == 0 or losses.mean() == 0:
        return W * 100
    R = float(wins.mean() / losses.mean())
    return (W - (1 - W) / R) * 100


def write_metrics_csv(rows: dict[str, PortfolioMetrics], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", *PortfolioMetrics.COLUMNS, "sharpe_undefined"])
        for name, m in rows.items():
            w.writerow([name, *(repr(float(x)) for x in m.row()), int(m.sharpe_undefined)])
