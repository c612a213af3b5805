"""Deterministic synthetic market data and whale-alert tweets.

Used for the bundled demo fixture and for tests. Prices follow a random walk
whose daily volatility switches between a calm and a turbulent regime, so the
transformed volatility crosses the spike threshold now and then.
"""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CALM_SIGMA = 0.02
TURBULENT_SIGMA = 0.065

WALLETS = ("Unknown wallet", "unknown wallet", "#Wallet42", "cold storage")
EXCHANGES = ("#Binance", "#Bitfinex", "#Coinbase", "#Gemini", "#Kraken", "Bitstamp")


@dataclass(frozen=True)
class TweetTruth:
    """What a parser should extract from a generated tweet (``None`` fields when it should be rejected)."""

    date: dt.date
    text: str
    accept: bool
    btc: float | None = None
    usd: float | None = None
    source: str | None = None
    destination: str | None = None


def _grouped(x: float, decimals: int = 0) -> str:
    return f"{x:,.{decimals}f}"


def synthetic_tweets(n: int, seed: int = 0, start: dt.date = dt.date(2020, 1, 1), days: int = 30) -> list[TweetTruth]:
    """``n`` alert tweets mixing valid BTC transfers, other coins, burns and malformed amounts."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        date = start + dt.timedelta(days=int(rng.integers(days)))
        kind = rng.choice(["btc", "btc", "btc", "eth", "burn", "bad_amount", "no_usd"])
        decimals = int(rng.integers(0, 3))
        btc = round(float(rng.uniform(100, 20_000)), decimals)
        usd = float(round(btc * rng.uniform(5_000, 60_000)))
        a, b = rng.permutation(WALLETS + EXCHANGES)[:2]
        emoji = "\U0001F6A8 " if rng.random() < 0.3 else ""
        link = " https://whale-alert.io/tx/" + "".join(rng.choice(list("0123456789abcdef"), 12)) if rng.random() < 0.5 else ""
        btc_s, usd_s = _grouped(btc, decimals), _grouped(usd)
        if kind == "btc":
            text = f"{emoji}{btc_s} #BTC ({usd_s} USD) transferred from {a} to {b}{link}"
            out.append(TweetTruth(date, text, True, btc, usd, a, b))
        elif kind == "eth":
            out.append(TweetTruth(date, f"{btc_s} #ETH ({usd_s} USD) transferred from {a} to {b}{link}", False))
        elif kind == "burn":
            out.append(TweetTruth(date, f"{usd_s} #USDC ({usd_s} USD) burned at USDC Treasury{link}", False))
        elif kind == "bad_amount":
            out.append(TweetTruth(date, f"{emoji}lots of #BTC ({usd_s} USD) transferred from {a} to {b}", False))
        else:
            out.append(TweetTruth(date, f"{btc_s} #BTC transferred from {a} to {b}", False))
    return out


def synthetic_market(days: int, seed: int = 0, start: dt.date = dt.date(2020, 1, 1)) -> dict[str, np.ndarray | list]:
    rng = np.random.default_rng(seed)
    turbulent = np.zeros(days, dtype=bool)
    state = False
    for t in range(days):
        # sticky two-state chain: calm spells ~30 days, turbulent ~8 days
        if rng.random() < (1 / 8 if state else 1 / 30):
            state = not state
        turbulent[t] = state
    sigma = np.where(turbulent, TURBULENT_SIGMA, CALM_SIGMA)
    r = rng.normal(0.0005, sigma)
    close = 8000.0 * np.exp(np.cumsum(r))
    open_ = np.concatenate([[8000.0], close[:-1]]) * np.exp(rng.normal(0, 0.002, days))
    span = np.abs(rng.normal(0, sigma)) * close
    high = np.maximum(open_, close) + span * rng.uniform(0.1, 0.6, days)
    low = np.minimum(open_, close) - span * rng.uniform(0.1, 0.6, days)
    low = np.maximum(low, 0.5 * np.minimum(open_, close))
    volume = np.exp(rng.normal(10, 0.3, days) + 2 * sigma * 10)
    funding = rng.normal(0.0001, 0.0003, days)
    funding[: days // 10] = np.nan  # series starts late, like most derivatives data
    return {
        "date": [start + dt.timedelta(days=i) for i in range(days)],
        "open": open_,
        "high": high,
        "low": low,
        "close": close,
        "volume": volume,
        "funding_rates": funding,
    }


def write_fixture(directory, days: int = 420, tweets_per_day: float = 1.5, seed: int = 11) -> tuple[Path, Path]:
    """Write ``fixture_market.csv`` and ``fixture_tweets.tsv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m = synthetic_market(days, seed)
    market = d / "fixture_market.csv"
    names = [k for k in m if k != "date"]
    with market.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *names])
        for i, day in enumerate(m["date"]):
            w.writerow([day.isoformat(), *("" if np.isnan(m[k][i]) else repr(round(float(m[k][i]), 6)) for k in names)])
    # whale tweets start a third of the way in, like the real corpus starting late
    start = m["date"][days // 3]
    span = days - days // 3
    tw = synthetic_tweets(int(span * tweets_per_day), seed + 1, start, span)
    tw.sort(key=lambda t: t.date)
    corpus = d / "fixture_tweets.tsv"
    with corpus.open("w", encoding="utf-8") as fh:
        for t in tw:
            fh.write(f"{t.date.isoformat()}\t{t.text}\n")
    return market, corpus
