"""AdamW training loop with early stopping, and grid search over architecture/batch settings."""

from __future__ import annotations

import copy
import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .ingest import FeatureFrame, concat
from .model import DTYPE, ModelConfig, VolatilityTransformer, predict_windows

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class FrameTooShortError(TrainingError, ValueError):
    pass


class NonFiniteLossError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-6
    batch_size: int = 4
    max_epochs: int = 10_000
    patience: int = 200
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))

    def problems(self) -> list[str]:
        errs = []
        if not self.learning_rate >= 0:
            errs.append("learning_rate must be >= 0")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.max_epochs < 1:
            errs.append("max_epochs must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            errs.append("patience must satisfy 0 < patience < max_epochs")
        return errs


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch - 1] if self.best_epoch else math.inf

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_mse", "val_rmse", "is_best"])
            for i, (tr, va) in enumerate(zip(self.train_loss, self.val_loss), start=1):
                w.writerow([i, repr(tr), repr(va), int(i == self.best_epoch)])


# ---------------------------------------------------------------------------
# windowing


def sliding_windows(frame: FeatureFrame, inputs: Sequence[str], target: str, seq_len: int):
    """All stride-1 windows: ``X`` is ``(W, seq_len, F)`` and ``Y`` is ``(W, seq_len)``."""
    if len(frame) < seq_len:
        raise FrameTooShortError(f"frame has {len(frame)} rows, need at least seq_len={seq_len}")
    X = frame.matrix(inputs)
    y = frame[target]
    Xw = np.lib.stride_tricks.sliding_window_view(X, seq_len, axis=0).transpose(0, 2, 1)
    Yw = np.lib.stride_tricks.sliding_window_view(y, seq_len)
    return np.ascontiguousarray(Xw), np.ascontiguousarray(Yw)


def final_position_windows(
    frame: FeatureFrame,
    inputs: Sequence[str],
    target: str,
    seq_len: int,
    context: FeatureFrame | None = None,
):
    """One window ending at each row of ``frame``; rows before it come from ``context``.

    Without usable context, only rows with a full in-frame history get a
    window. Returns ``(X, y_last, row_index)`` where ``row_index`` indexes ``frame``.
    """
    lead = 0
    full = frame
    if context is not None and len(context) and len(frame):
        if (frame.dates[0] - context.dates[-1]).days == 1:
            lead = min(seq_len - 1, len(context))
            full = concat([context.rows(len(context) - lead, len(context)), frame])
    X, Y = sliding_windows(full, inputs, target, seq_len)
    rows = np.arange(X.shape[0]) + seq_len - 1 - lead
    return X, Y[:, -1], rows


def rmse_final(model, X: np.ndarray, y_last: np.ndarray) -> float:
    pred = predict_windows(model, X)[:, -1]
    return float(np.sqrt(np.mean((pred - y_last) ** 2)))


# ---------------------------------------------------------------------------
# training


def train(
    mc: ModelConfig,
    tc: TrainConfig,
    train_frame: FeatureFrame,
    val_frame: FeatureFrame,
    inputs: Sequence[str],
    target: str,
    val_metric: Callable[[VolatilityTransformer, int], float] | None = None,
) -> tuple[VolatilityTransformer, TrainHistory]:
    """Train with AdamW, keeping the weights from the best validation epoch.

    Validation loss is the RMSE of final-position predictions over the
    validation windows (``val_metric`` replaces it when given). Training stops
    once ``patience`` epochs pass without improvement.
    """
    if len(train_frame) < mc.seq_len + 1:
        raise FrameTooShortError(
            f"training frame has {len(train_frame)} rows, need seq_len + 1 = {mc.seq_len + 1}"
        )
    if mc.input_dim != len(inputs):
        mc = replace(mc, input_dim=len(inputs))
    Xtr, Ytr = sliding_windows(train_frame, inputs, target, mc.seq_len)
    Xtr_t = torch.as_tensor(Xtr, dtype=DTYPE)
    Ytr_t = torch.as_tensor(Ytr, dtype=DTYPE)
    if val_metric is None:
        Xv, yv, _ = final_position_windows(val_frame, inputs, target, mc.seq_len, context=train_frame)
        val_metric = lambda m, epoch: rmse_final(m, Xv, yv)  # noqa: E731

    torch.manual_seed(tc.seed)
    model = VolatilityTransformer(mc)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=tc.learning_rate,
        betas=(tc.beta1, tc.beta2),
        eps=tc.adam_eps,
        weight_decay=tc.weight_decay,
    )
    shuffler = torch.Generator().manual_seed(tc.seed)
    hist = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    best = math.inf
    n = Xtr_t.shape[0]

    for epoch in range(1, tc.max_epochs + 1):
        model.train()
        order = torch.randperm(n, generator=shuffler)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            pred = model(Xtr_t[idx])
            loss = torch.mean((pred - Ytr_t[idx]) ** 2)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        hist.train_loss.append(total / n)
        v = float(val_metric(model, epoch))
        if not math.isfinite(v):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        hist.val_loss.append(v)
        if v < best:
            best = v
            hist.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - hist.best_epoch >= tc.patience:
            hist.stopped_epoch = epoch
            break
    else:
        hist.stopped_epoch = tc.max_epochs
    model.load_state_dict(best_state)
    model.eval()
    logger.info(
        "%s: best val %.6g at epoch %d, stopped at %d",
        mc.variant.value, best, hist.best_epoch, hist.stopped_epoch,
    )
    return model, hist


# ---------------------------------------------------------------------------
# grid search


@dataclass(frozen=True)
class HyperGrid:
    layers: tuple[int, ...] = (1, 2, 4, 8)
    heads: tuple[int, ...] = (2, 4, 8)
    batch_size: tuple[int, ...] = (4, 8, 16, 32, 64)
    dropout: tuple[float, ...] = (0.1, 0.2)

    def __post_init__(self):
        for name in ("layers", "heads", "batch_size", "dropout"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"grid axis {name!r} is empty")
            object.__setattr__(self, name, vals)

    def points(self) -> list[dict]:
        return [
            {"layers": l, "heads": h, "batch_size": b, "dropout": d}
            for l, h, b, d in itertools.product(self.layers, self.heads, self.batch_size, self.dropout)
        ]

    def __contains__(self, point: dict) -> bool:
        return all(point[k] in getattr(self, k) for k in ("layers", "heads", "batch_size", "dropout"))


@dataclass
class LeaderboardRow:
    rank: int
    index: int
    layers: int
    heads: int
    batch_size: int
    dropout: float
    seed: int
    best_val_rmse: float
    best_epoch: int
    stopped_epoch: int


@dataclass
class GridResult:
    model_config: ModelConfig
    train_config: TrainConfig
    leaderboard: list[LeaderboardRow]
    model: VolatilityTransformer | None = None
    history: TrainHistory | None = None
    # every trained point in grid order: (model_config, train_config, model, history)
    points: list[tuple] = field(default_factory=list)

    def write_leaderboard(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        names = list(LeaderboardRow.__dataclass_fields__)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in self.leaderboard:
                d = asdict(row)
                w.writerow([repr(d[k]) if isinstance(d[k], float) else d[k] for k in names])


class GridPointError(TrainingError):
    def __init__(self, point: dict, cause: BaseException):
        self.point = point
        super().__init__(f"grid point {point}: {cause}")


def coordinate_name(mc: ModelConfig, tc: TrainConfig) -> str:
    """File-name stem for a grid point, e.g. ``L2_H4_B32_D0.1``."""
    return f"L{mc.layers}_H{mc.heads}_B{tc.batch_size}_D{mc.dropout!r}"


def point_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def _run_point(args):
    index, point, mc_base, tc_base, train_frame, val_frame, inputs, target, train_fn = args
    mc = replace(mc_base, layers=point["layers"], heads=point["heads"], dropout=point["dropout"])
    tc = replace(tc_base, batch_size=point["batch_size"], seed=point_seed(tc_base.seed, index))
    try:
        model, hist = train_fn(mc, tc, train_frame, val_frame, inputs, target)
    except Exception as exc:  # annotate with coordinates
        raise GridPointError(point, exc) from exc
    return index, mc, tc, model, hist


def grid_search(
    grid: HyperGrid,
    mc_base: ModelConfig,
    tc_base: TrainConfig,
    train_frame: FeatureFrame,
    val_frame: FeatureFrame,
    inputs: Sequence[str],
    target: str,
    train_fn: Callable = train,
    workers: int = 1,
) -> GridResult:
    """Train every grid point and pick the lowest best-validation RMSE.

    Ties go to fewer layers, then fewer heads, smaller batch, lower dropout.
    """
    jobs = [
        (i, p, mc_base, tc_base, train_frame, val_frame, tuple(inputs), target, train_fn)
        for i, p in enumerate(grid.points())
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_point, jobs))
    else:
        results = [_run_point(j) for j in jobs]

    def key(r):
        _, mc, tc, _, hist = r
        return (hist.best_val_loss, mc.layers, mc.heads, tc.batch_size, mc.dropout)

    ranked = sorted(results, key=key)
    board = [
        LeaderboardRow(
            rank=k + 1,
            index=i,
            layers=mc.layers,
            heads=mc.heads,
            batch_size=tc.batch_size,
            dropout=mc.dropout,
            seed=tc.seed,
            best_val_rmse=hist.best_val_loss,
            best_epoch=hist.best_epoch,
            stopped_epoch=hist.stopped_epoch,
        )
        for k, (i, mc, tc, _, hist) in enumerate(ranked)
    ]
    _, mc, tc, model, hist = ranked[0]
    return GridResult(mc, tc, board, model, hist, points=[r[1:] for r in sorted(results, key=lambda r: r[0])])
