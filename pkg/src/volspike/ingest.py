"""Loading, gap repair and date-based splitting of the daily feature table."""

from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

# Missing cells are NaN. Zero is a real value for flow columns, so it can't be the marker.
MISSING = float("nan")

_ONE_DAY = dt.timedelta(days=1)


class IngestError(ValueError):
    """Base class for dataset loading / splitting failures."""


class DatasetNotFoundError(IngestError, FileNotFoundError):
    pass


class MissingDateColumnError(IngestError):
    pass


class DuplicateDateError(IngestError):
    pass


class NonMonotoneDateError(IngestError):
    pass


class DateGapError(IngestError):
    pass


class ColumnLengthError(IngestError):
    pass


class FillError(IngestError):
    pass


class BoundaryError(IngestError):
    pass


def is_missing(values) -> np.ndarray:
    return np.isnan(np.asarray(values, dtype=float))


@dataclass(frozen=True)
class FeatureFrame:
    """Date-indexed table of real-valued columns.

    ``columns`` keeps insertion order, which is also the CSV column order.
    """

    dates: tuple[dt.date, ...]
    columns: dict[str, np.ndarray]
    target_column: str | None = None

    def __post_init__(self):
        dates = tuple(self.dates)
        object.__setattr__(self, "dates", dates)
        cols = {}
        for name, values in self.columns.items():
            arr = np.array(values, dtype=np.float64)
            if arr.ndim != 1 or len(arr) != len(dates):
                raise ColumnLengthError(
                    f"column {name!r} has length {arr.size}, expected {len(dates)}"
                )
            arr.setflags(write=False)
            cols[name] = arr
        object.__setattr__(self, "columns", cols)
        _check_dates(dates)

    def __len__(self) -> int:
        return len(self.dates)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def with_columns(self, **new: Iterable[float]) -> "FeatureFrame":
        cols = dict(self.columns)
        cols.update({k: np.asarray(v, dtype=float) for k, v in new.items()})
        return FeatureFrame(self.dates, cols, self.target_column)

    def select(self, names: Iterable[str]) -> "FeatureFrame":
        names = list(names)
        return FeatureFrame(self.dates, {n: self.columns[n] for n in names}, self.target_column)

    def rows(self, start: int, stop: int) -> "FeatureFrame":
        return FeatureFrame(
            self.dates[start:stop],
            {k: v[start:stop] for k, v in self.columns.items()},
            self.target_column,
        )

    def matrix(self, names: Iterable[str]) -> np.ndarray:
        """Stack the named columns into an (n_rows, n_cols) float64 array."""
        names = list(names)
        if not names:
            return np.empty((len(self), 0))
        return np.column_stack([self.columns[n] for n in names])

    def index_of(self, date: dt.date) -> int:
        if not self.dates:
            raise KeyError(date)
        i = (date - self.dates[0]).days
        if i < 0 or i >= len(self.dates):
            raise KeyError(date)
        return i


def _check_dates(dates: tuple[dt.date, ...]) -> None:
    seen = set()
    for i, d in enumerate(dates):
        if d in seen:
            raise DuplicateDateError(f"duplicate date {d.isoformat()}")
        seen.add(d)
        if i and d < dates[i - 1]:
            raise NonMonotoneDateError(
                f"date {d.isoformat()} follows {dates[i - 1].isoformat()}"
            )
        if i and d - dates[i - 1] != _ONE_DAY:
            raise DateGapError(
                f"gap between {dates[i - 1].isoformat()} and {d.isoformat()}"
            )


@dataclass(frozen=True)
class SplitBoundaries:
    """Inclusive upper bounds for the train / validation / test partitions."""

    train_end: dt.date
    val_end: dt.date
    test_end: dt.date

    def __post_init__(self):
        if not (self.train_end < self.val_end < self.test_end):
            raise BoundaryError(
                "split boundaries must satisfy train_end < val_end < test_end"
            )


@dataclass(frozen=True)
class FillPolicy:
    backfill_columns: frozenset[str] = field(default_factory=frozenset)
    zero_columns: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "backfill_columns", frozenset(self.backfill_columns))
        object.__setattr__(self, "zero_columns", frozenset(self.zero_columns))
        both = self.backfill_columns & self.zero_columns
        if both:
            raise FillError(f"columns in both fill sets: {sorted(both)}")


def _parse_float(cell: str) -> float:
    cell = cell.strip()
    if not cell:
        return MISSING
    try:
        return float(cell)
    except ValueError:
        return MISSING


def load_dataset(path, target_column: str | None = None) -> FeatureFrame:
    """Read a comma-separated daily table with an ISO ``date`` column.

    Every other column is parsed as float; cells that don't parse become
    :data:`MISSING`.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetNotFoundError(f"dataset not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MissingDateColumnError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if "date" not in header:
            raise MissingDateColumnError(f"{path}: no 'date' column in header")
        di = header.index("date")
        names = [h for i, h in enumerate(header) if i != di]
        dates: list[dt.date] = []
        data: list[list[float]] = [[] for _ in names]
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            row = row + [""] * (len(header) - len(row))
            try:
                dates.append(dt.date.fromisoformat(row[di].strip()))
            except ValueError:
                raise IngestError(f"{path}:{lineno}: bad date {row[di]!r}") from None
            k = 0
            for i, cell in enumerate(row[: len(header)]):
                if i == di:
                    continue
                data[k].append(_parse_float(cell))
                k += 1
    if target_column is not None and target_column not in names:
        raise IngestError(f"{path}: target column {target_column!r} not present")
    return FeatureFrame(tuple(dates), dict(zip(names, data)), target_column)


def _format_float(x: float) -> str:
    if np.isnan(x):
        return ""
    return repr(float(x))


def save_dataset(frame: FeatureFrame, path) -> None:
    """Write ``frame`` as CSV; finite values round-trip exactly through :func:`load_dataset`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = frame.names
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *names])
        cols = [frame.columns[n] for n in names]
        for i, d in enumerate(frame.dates):
            w.writerow([d.isoformat(), *(_format_float(c[i]) for c in cols)])


def _backfill(values: np.ndarray, name: str) -> np.ndarray:
    miss = np.isnan(values)
    if not miss.any():
        return values.copy()
    if miss.all():
        raise FillError(f"column {name!r} has no values to backfill from")
    out = values.copy()
    first = int(np.argmax(~miss))
    out[:first] = values[first]
    # interior gaps carry the previous value forward (no lookahead)
    for i in range(first + 1, len(out)):
        if np.isnan(out[i]):
            out[i] = out[i - 1]
    return out


def fill_missing(frame: FeatureFrame, policy: FillPolicy) -> FeatureFrame:
    uncovered = [
        n
        for n, v in frame.columns.items()
        if np.isnan(v).any()
        and n not in policy.backfill_columns
        and n not in policy.zero_columns
    ]
    if uncovered:
        raise FillError(f"missing values in columns without a fill rule: {uncovered}")
    cols = {}
    for name, values in frame.columns.items():
        if name in policy.backfill_columns:
            cols[name] = _backfill(values, name)
        elif name in policy.zero_columns:
            cols[name] = np.where(np.isnan(values), 0.0, values)
        else:
            cols[name] = values
    return FeatureFrame(frame.dates, cols, frame.target_column)


def split_by_date(
    frame: FeatureFrame, b: SplitBoundaries
) -> tuple[FeatureFrame, FeatureFrame, FeatureFrame]:
    """Partition into rows ``<= train_end``, ``(train_end, val_end]`` and ``(val_end, test_end]``."""
    if not frame.dates:
        raise BoundaryError("cannot split an empty frame")
    first, last = frame.dates[0], frame.dates[-1]
    for label, d in (("train_end", b.train_end), ("val_end", b.val_end), ("test_end", b.test_end)):
        if not first <= d <= last:
            raise BoundaryError(
                f"{label}={d.isoformat()} outside frame range "
                f"{first.isoformat()}..{last.isoformat()}"
            )
    i_train = frame.index_of(b.train_end) + 1
    i_val = frame.index_of(b.val_end) + 1
    i_test = frame.index_of(b.test_end) + 1
    return frame.rows(0, i_train), frame.rows(i_train, i_val), frame.rows(i_val, i_test)


def concat(frames: Iterable[FeatureFrame]) -> FeatureFrame:
    frames = [f for f in frames if len(f)]
    if not frames:
        raise IngestError("nothing to concatenate")
    names = frames[0].names
    dates = tuple(d for f in frames for d in f.dates)
    cols = {n: np.concatenate([f.columns[n] for f in frames]) for n in names}
    return FeatureFrame(dates, cols, frames[0].target_column)


def merge_on_date(left: FeatureFrame, right: FeatureFrame) -> FeatureFrame:
    """Left join ``right``'s columns onto ``left`` by date; unmatched rows are MISSING."""
    pos = {d: i for i, d in enumerate(right.dates)}
    idx = np.array([pos.get(d, -1) for d in left.dates])
    hit = idx >= 0
    cols = dict(left.columns)
    for name, values in right.columns.items():
        out = np.full(len(left), MISSING)
        out[hit] = values[idx[hit]]
        cols[name] = out
    return FeatureFrame(left.dates, cols, left.target_column)
