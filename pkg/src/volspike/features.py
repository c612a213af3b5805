"""Technical indicators, realized-volatility target, per-column transforms and spike labels."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ANNUALIZATION_DAYS = 365.0


class FeatureError(ValueError):
    pass


class DomainError(FeatureError):
    """A transform was applied outside its domain. ``index`` is the first offending position."""

    def __init__(self, method: "TransformMethod", index: int, value: float):
        self.method = method
        self.index = index
        self.value = value
        super().__init__(f"{method.name}: value {value!r} at index {index} is outside the domain")


@dataclass(frozen=True)
class EmaParams:
    n: int = 10
    S: float = 2.0

    def __post_init__(self):
        if self.n < 1:
            raise FeatureError("EMA window n must be >= 1")
        if self.S < 0:
            raise FeatureError("EMA smoothing S must be >= 0")

    @property
    def alpha(self) -> float:
        return self.S / (1 + self.n)


@dataclass(frozen=True)
class VolatilityParams:
    window: int = 7
    annualization: float = ANNUALIZATION_DAYS

    def __post_init__(self):
        if self.window < 2:
            raise FeatureError("volatility window must be >= 2")
        if self.annualization <= 0:
            raise FeatureError("annualization must be positive")


class TransformMethod(enum.IntEnum):
    """Column transforms, stored in configs by their integer code (0-5)."""

    NONE = 0
    LOG = 1
    SQRT = 2
    CBRT = 3
    POW14 = 4
    LOG1P = 5


@dataclass(frozen=True)
class SpikeRule:
    threshold: float = 1.0

    def __post_init__(self):
        if not self.threshold > 0:
            raise FeatureError("spike threshold must be positive")


def log_returns(closes: Sequence[float]) -> np.ndarray:
    c = np.asarray(closes, dtype=float)
    if c.size < 2:
        raise FeatureError("need at least two prices for log-returns")
    bad = np.flatnonzero(~(c > 0))
    if bad.size:
        raise FeatureError(f"non-positive price {c[bad[0]]!r} at index {bad[0]}")
    return np.log(c[1:] / c[:-1])


def realized_volatility(returns: Sequence[float], p: VolatilityParams = VolatilityParams()) -> np.ndarray:
    """Annualized volatility over each trailing window of ``p.window`` returns.

    Output element k covers returns ``k .. k+window-1``, so the result is
    ``window - 1`` shorter than the input.
    """
    r = np.asarray(returns, dtype=float)
    n = p.window
    if r.size < n:
        raise FeatureError(f"need at least {n} returns, got {r.size}")
    windows = np.lib.stride_tricks.sliding_window_view(r, n)
    dev = windows - windows.mean(axis=1, keepdims=True)
    return np.sqrt((dev**2).sum(axis=1) * p.annualization / n)


def ema(series: Sequence[float], p: EmaParams = EmaParams()) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise FeatureError("EMA of an empty series")
    a = p.alpha
    out = np.empty_like(x)
    out[0] = x[0]
    for t in range(1, x.size):
        out[t] = x[t] * a + out[t - 1] * (1 - a)
    return out


def candle_spreads(open_, high, low, close):
    """High-low spread relative to close and close-open move relative to open.

    Accepts scalars or equal-length arrays.
    """
    o, h, l, c = (np.asarray(v, dtype=float) for v in (open_, high, low, close))
    if np.any(h < l):
        raise FeatureError("high below low")
    if np.any(~(o > 0)) or np.any(~(h > 0)) or np.any(~(l > 0)) or np.any(~(c > 0)):
        raise FeatureError("prices must be positive")
    hl = (h - l) / c
    co = (c - o) / o
    if hl.ndim == 0:
        return float(hl), float(co)
    return hl, co


_DOMAIN = {
    TransformMethod.LOG: lambda v: v > 0,
    TransformMethod.SQRT: lambda v: v >= 0,
    TransformMethod.POW14: lambda v: v >= 0,
    TransformMethod.LOG1P: lambda v: v > -1,
}


def apply_transform(values, m: TransformMethod | int):
    """Apply transform ``m`` elementwise. Missing (NaN) cells pass through untouched."""
    m = TransformMethod(m)
    scalar = np.ndim(values) == 0
    x = np.atleast_1d(np.asarray(values, dtype=float))
    present = ~np.isnan(x)
    check = _DOMAIN.get(m)
    if check is not None:
        ok = np.ones_like(present)
        ok[present] = check(x[present])
        bad = np.flatnonzero(~ok)
        if bad.size:
            raise DomainError(m, int(bad[0]), float(x[bad[0]]))
    if m is TransformMethod.NONE:
        out = x.copy()
    elif m is TransformMethod.LOG:
        out = np.log(x)
    elif m is TransformMethod.SQRT:
        out = np.sqrt(x)
    elif m is TransformMethod.CBRT:
        out = np.cbrt(x)
    elif m is TransformMethod.POW14:
        out = np.sqrt(np.sqrt(x))
    else:
        out = np.log1p(x)
    return float(out[0]) if scalar else out


def label_spikes(transformed_vol, log_ret, rule: SpikeRule = SpikeRule()) -> np.ndarray:
    v = np.asarray(transformed_vol, dtype=float)
    r = np.asarray(log_ret, dtype=float)
    if v.shape != r.shape:
        raise FeatureError(f"length mismatch: {v.shape} vs {r.shape}")
    return (v >= rule.threshold) & (r > 0)
