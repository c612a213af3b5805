"""Rule-based parsing of whale-alert tweets into daily BTC exchange flows.

A usable tweet looks like::

    997 #BTC (6,269,280 USD) transferred from #Bitfinex to Unknown wallet

Only tweets carrying ``#BTC`` and the word ``transferred`` are kept. The
source is everything between ``from`` and ``to``; the destination runs to the
end of the text (trailing links stripped).
"""

from __future__ import annotations

import datetime as dt
import enum
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .ingest import FeatureFrame

logger = logging.getLogger(__name__)

FLOW_COLUMNS = ("BTCminus", "BTCplus", "USDminus", "USDplus")

DEFAULT_EXCHANGES = (
    "binance", "bitfinex", "bitflyer", "bithumb", "bitmex", "bitstamp",
    "bittrex", "bybit", "coinbase", "coincheck", "deribit", "ftx", "gateio",
    "gemini", "hitbtc", "huobi", "kraken", "kucoin", "okex", "okx",
    "poloniex", "upbit",
)

_AMOUNT = r"[0-9][0-9,]*(?:\.[0-9]+)?"
_BTC_TAG = re.compile(r"(?<![\w#])#BTC\b")
_TRANSFERRED = re.compile(r"\btransferred\b")
# alert emoji may precede the amount
_LEAD_AMOUNT = re.compile(rf"^[^\w#(]*(?P<amt>{_AMOUNT})\s+#BTC\b")
_USD_AMOUNT = re.compile(rf"\(\s*(?P<usd>{_AMOUNT})\s+USD\s*\)")
_ROUTE = re.compile(r"\btransferred\s+from\s+(?P<src>.+?)\s+to\s+(?P<dst>.+?)\s*$", re.S)
_URL = re.compile(r"https?://\S+")
_GROUPED = re.compile(r"^[0-9]{1,3}(?:,[0-9]{3})*(?:\.[0-9]+)?$|^[0-9]+(?:\.[0-9]+)?$")


class FlowDirection(enum.Enum):
    WalletToExchange = "wallet_to_exchange"
    ExchangeToWallet = "exchange_to_wallet"
    Ignored = "ignored"


@dataclass(frozen=True)
class WhaleTransfer:
    timestamp: dt.date
    btc_amount: float
    usd_amount: float
    source: str
    destination: str

    def __post_init__(self):
        if not self.btc_amount > 0:
            raise ValueError("btc_amount must be positive")
        if not self.usd_amount >= 0:
            raise ValueError("usd_amount must be non-negative")
        if not self.source or not self.destination:
            raise ValueError("source and destination must be non-empty")


@dataclass(frozen=True)
class DailyWhaleFlows:
    date: dt.date
    BTCminus: float = 0.0
    BTCplus: float = 0.0
    USDminus: float = 0.0
    USDplus: float = 0.0


class ExchangeRegistry:
    """Case-insensitive set of exchange names; a leading ``#`` is ignored on lookup."""

    def __init__(self, names: Iterable[str] = DEFAULT_EXCHANGES):
        self._names = frozenset(_norm(n) for n in names if _norm(n))
        if not self._names:
            raise ValueError("exchange registry must not be empty")

    def __contains__(self, label: str) -> bool:
        return _norm(label) in self._names

    def __iter__(self):
        return iter(sorted(self._names))

    def __len__(self) -> int:
        return len(self._names)


def _norm(label: str) -> str:
    return label.strip().lstrip("#").strip().lower()


def _parse_amount(text: str) -> float | None:
    if not _GROUPED.match(text):
        return None
    try:
        return float(text.replace(",", ""))
    except ValueError:
        return None


class _Rejected(Exception):
    def __init__(self, reason: str):
        self.reason = reason


def _extract(text: str, date: dt.date) -> WhaleTransfer | None:
    if not text or not _BTC_TAG.search(text) or not _TRANSFERRED.search(text):
        return None
    text = _URL.sub("", text).strip()
    lead = _LEAD_AMOUNT.match(text)
    if lead is None:
        raise _Rejected("malformed_amount")
    btc = _parse_amount(lead["amt"])
    if btc is None or btc <= 0:
        raise _Rejected("malformed_amount")
    usd_m = _USD_AMOUNT.search(text)
    usd = _parse_amount(usd_m["usd"]) if usd_m else None
    if usd is None:
        raise _Rejected("malformed_amount")
    route = _ROUTE.search(text)
    if route is None:
        raise _Rejected("missing_route")
    src, dst = route["src"].strip(), route["dst"].strip()
    if not src or not dst:
        raise _Rejected("missing_route")
    return WhaleTransfer(date, btc, usd, src, dst)


def parse_tweet(text: str, date: dt.date) -> WhaleTransfer | None:
    """Return the transfer described by ``text``, or None if it isn't a parseable BTC transfer."""
    try:
        return _extract(text, date)
    except _Rejected:
        return None


def classify_direction(t: WhaleTransfer, reg: ExchangeRegistry) -> FlowDirection:
    src_ex = _is_exchange(t.source, reg)
    dst_ex = _is_exchange(t.destination, reg)
    if not src_ex and dst_ex:
        return FlowDirection.WalletToExchange
    if src_ex and not dst_ex:
        return FlowDirection.ExchangeToWallet
    return FlowDirection.Ignored


def _is_exchange(label: str, reg: ExchangeRegistry) -> bool:
    if _norm(label) == "unknown wallet":
        return False
    return label in reg


def aggregate_daily(
    transfers: Iterable[tuple[WhaleTransfer, FlowDirection]],
    dates: Sequence[dt.date],
) -> list[DailyWhaleFlows]:
    """Sum classified transfers per day over ``dates``. Transfers outside the range are dropped."""
    sums = {d: [0.0, 0.0, 0.0, 0.0] for d in dates}
    for t, direction in transfers:
        acc = sums.get(t.timestamp)
        if acc is None or direction is FlowDirection.Ignored:
            continue
        if direction is FlowDirection.WalletToExchange:
            acc[0] += t.btc_amount
            acc[2] += t.usd_amount
        else:
            acc[1] += t.btc_amount
            acc[3] += t.usd_amount
    return [DailyWhaleFlows(d, *sums[d]) for d in dates]


def net_exchange_flow(f: DailyWhaleFlows) -> float:
    return abs(f.BTCplus - f.BTCminus)


@dataclass
class ParseStats:
    lines: int = 0
    accepted: int = 0
    not_btc_transfer: int = 0
    rejected: Counter = field(default_factory=Counter)
    unregistered_tags: Counter = field(default_factory=Counter)
    directions: Counter = field(default_factory=Counter)

    def as_dict(self) -> dict:
        return {
            "lines": self.lines,
            "accepted": self.accepted,
            "not_btc_transfer": self.not_btc_transfer,
            "rejected": dict(sorted(self.rejected.items())),
            "unregistered_tags": dict(sorted(self.unregistered_tags.items())),
            "directions": dict(sorted(self.directions.items())),
        }


def iter_corpus(path) -> Iterator[tuple[int, dt.date, str]]:
    """Yield ``(line_number, date, text)`` from a ``<ISO date>\\t<text>`` file."""
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            head, sep, text = line.partition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected '<date>\\t<text>'")
            yield lineno, dt.date.fromisoformat(head.strip()[:10]), text


def parse_corpus(
    records: Iterable[tuple[dt.date, str]], reg: ExchangeRegistry
) -> tuple[list[tuple[WhaleTransfer, FlowDirection]], ParseStats]:
    stats = ParseStats()
    out = []
    for date, text in records:
        stats.lines += 1
        try:
            t = _extract(text, date)
        except _Rejected as exc:
            stats.rejected[exc.reason] += 1
            continue
        if t is None:
            stats.not_btc_transfer += 1
            continue
        for label in (t.source, t.destination):
            if label.strip().startswith("#") and label not in reg:
                stats.unregistered_tags[_norm(label)] += 1
        direction = classify_direction(t, reg)
        stats.accepted += 1
        stats.directions[direction.value] += 1
        out.append((t, direction))
    if stats.unregistered_tags:
        logger.warning(
            "%d hashtag entities not in the exchange registry were treated as wallets",
            sum(stats.unregistered_tags.values()),
        )
    return out, stats


def flows_to_frame(flows: Sequence[DailyWhaleFlows]) -> FeatureFrame:
    return FeatureFrame(
        tuple(f.date for f in flows),
        {c: [getattr(f, c) for f in flows] for c in FLOW_COLUMNS},
    )
