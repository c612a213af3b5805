"""Regression / spike-classification metrics, correlation statistics and feature ablation."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import predict_windows


class MetricError(ValueError):
    pass


def _pair(a, b, min_len: int = 1):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise MetricError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size < min_len:
        raise MetricError(f"need at least {min_len} values")
    return a, b


def rmse(pred, truth) -> float:
    p, t = _pair(pred, truth)
    return float(np.sqrt(np.mean((p - t) ** 2)))


@dataclass(frozen=True)
class ConfusionCounts:
    TP: int
    FP: int
    TN: int
    FN: int

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN


@dataclass(frozen=True)
class SpikeMetrics:
    precision: float
    recall: float
    f1: float


def predicted_spikes(pred_vol, realized_logret, T: float) -> np.ndarray:
    p, r = _pair(pred_vol, realized_logret, 0)
    return (p >= T) & (r > 0)


def confusion_at_threshold(pred_vol, realized_logret, truth_flags, T: float = 1.0) -> ConfusionCounts:
    flagged = predicted_spikes(pred_vol, realized_logret, T)
    truth = np.asarray(truth_flags, dtype=bool)
    if truth.shape != flagged.shape:
        raise MetricError(f"length mismatch: {flagged.shape} vs {truth.shape}")
    return ConfusionCounts(
        TP=int(np.sum(flagged & truth)),
        FP=int(np.sum(flagged & ~truth)),
        TN=int(np.sum(~flagged & ~truth)),
        FN=int(np.sum(~flagged & truth)),
    )


def spike_metrics(c: ConfusionCounts) -> SpikeMetrics:
    precision = c.TP / (c.TP + c.FP) if c.TP + c.FP else 0.0
    recall = c.TP / (c.TP + c.FN) if c.TP + c.FN else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return SpikeMetrics(precision, recall, f1)


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    TP: int
    FP: int
    TN: int
    FN: int
    precision: float
    recall: float
    f1: float


def threshold_sweep(pred_vol, realized_logret, truth_flags, thresholds: Sequence[float]) -> list[SweepRow]:
    rows = []
    for T in thresholds:
        c = confusion_at_threshold(pred_vol, realized_logret, truth_flags, T)
        m = spike_metrics(c)
        rows.append(SweepRow(float(T), c.TP, c.FP, c.TN, c.FN, m.precision, m.recall, m.f1))
    return rows


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = np.sqrt(np.sum(dx * dx))
    sy = np.sqrt(np.sum(dy * dy))
    if sx == 0 or sy == 0:
        raise MetricError("zero variance")
    return float(np.clip(np.sum(dx * dy) / (sx * sy), -1.0, 1.0))


def correlation_stats(x, y) -> tuple[float, float, float]:
    """``(r2, pearson, spearman)``; Spearman ranks ties by their average position."""
    x, y = _pair(x, y, 3)
    r = _pearson(x, y)
    rho = _pearson(_average_ranks(x), _average_ranks(y))
    return r * r, r, rho


# ---------------------------------------------------------------------------
# feature ablation


@dataclass(frozen=True)
class AblationEntry:
    feature: str
    score: float


@dataclass
class AblationReport:
    entries: list[AblationEntry]

    def top(self, k: int = 3) -> list[AblationEntry]:
        return self.entries[:k]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "feature", "score", "abs_score"])
            for i, e in enumerate(self.entries, start=1):
                w.writerow([i, e.feature, repr(e.score), repr(abs(e.score))])


def feature_ablation(
    model,
    windows: np.ndarray,
    feature_names: Sequence[str],
    baseline: Sequence[float],
    predict: Callable[[object, np.ndarray], np.ndarray] = predict_windows,
) -> AblationReport:
    """Replace one input feature at a time with its baseline value in every window.

    The score of feature ``j`` is the mean change of the final-position
    prediction, ``mean(pred_ablated - pred_original)``. Entries are ranked by
    absolute score, ties by name.
    """
    X = np.asarray(windows, dtype=float)
    base = np.asarray(baseline, dtype=float)
    if X.ndim != 3 or X.shape[2] != len(feature_names) or base.shape != (len(feature_names),):
        raise MetricError("windows, feature names and baseline disagree on the feature count")
    ref = predict(model, X)[:, -1]
    entries = []
    for j, name in enumerate(feature_names):
        Xa = X.copy()
        Xa[:, :, j] = base[j]
        entries.append(AblationEntry(name, float(np.mean(predict(model, Xa)[:, -1] - ref))))
    entries.sort(key=lambda e: (-abs(e.score), e.feature))
    return AblationReport(entries)


def top3_table(reports: dict[str, AblationReport]) -> list[dict]:
    """Rows of ``model, feature_1, score_1, ..., feature_3, score_3``."""
    rows = []
    for model_name, rep in reports.items():
        row = {"model": model_name}
        for i, e in enumerate(rep.top(3), start=1):
            row[f"feature_{i}"] = e.feature
            row[f"score_{i}"] = round(e.score, 2)
        rows.append(row)
    return rows


def sweep_to_csv(rows: Sequence[SweepRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(SweepRow.__dataclass_fields__)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            d = asdict(r)
            w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in names])
