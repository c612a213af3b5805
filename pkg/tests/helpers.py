"""Shared synthetic data for the training tests and the acceptance run."""

import datetime as dt

import numpy as np

from volspike.ingest import FeatureFrame
from volspike.model import ModelConfig, predict_windows
from volspike.train import TrainConfig, sliding_windows

D0 = dt.date(2020, 1, 1)
OVERFIT_INPUTS = ["x1", "x2", "x3"]


def dated(n, start=D0):
    return tuple(start + dt.timedelta(days=i) for i in range(n))


def overfit_frame(n=200):
    """Deterministic series whose target is a fixed function of the same-day features."""
    t = np.arange(n)
    x1 = np.sin(2 * np.pi * t / 17)
    x2 = np.cos(2 * np.pi * t / 23)
    x3 = (t % 7) / 6
    y = 0.8 + 0.2 * x1 * x2 + 0.1 * x3
    return FeatureFrame(dated(n), {"x1": x1, "x2": x2, "x3": x3, "y": y}, "y")


def overfit_configs(variant, epochs=300):
    mc = ModelConfig(variant=variant, layers=1, heads=2, model_dim=16, seq_len=16, dropout=0.0, input_dim=3)
    tc = TrainConfig(learning_rate=3e-3, weight_decay=0.0, batch_size=32, max_epochs=epochs, patience=epochs - 1, seed=0)
    return mc, tc


def train_rmse(model, frame, inputs=OVERFIT_INPUTS, target="y"):
    """RMSE over every position of every training window."""
    X, Y = sliding_windows(frame, inputs, target, model.cfg.seq_len)
    return float(np.sqrt(np.mean((predict_windows(model, X) - Y) ** 2)))
