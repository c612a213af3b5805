import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from helpers import OVERFIT_INPUTS, dated, overfit_configs, overfit_frame, train_rmse
from volspike.ingest import FeatureFrame
from volspike.model import ModelConfig, build_model
from volspike.train import (
    FrameTooShortError,
    GridPointError,
    HyperGrid,
    NonFiniteLossError,
    TrainConfig,
    TrainHistory,
    final_position_windows,
    grid_search,
    point_seed,
    rmse_final,
    sliding_windows,
    train,
)

TINY = ModelConfig(variant="vanilla", layers=1, heads=1, model_dim=4, seq_len=4, dropout=0.0, input_dim=1)


def tiny_frame(n=12, start=None):
    t = np.arange(n, dtype=float)
    kw = {} if start is None else {"start": start}
    return FeatureFrame(dated(n, **kw), {"x": np.sin(t), "y": np.cos(t)}, "y")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=10, max_epochs=10)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    tc = TrainConfig()
    assert (tc.learning_rate, tc.weight_decay, tc.max_epochs, tc.patience) == (1e-5, 1e-6, 10_000, 200)


def test_sliding_windows_shapes_and_content():
    f = tiny_frame(10)
    X, Y = sliding_windows(f, ["x"], "y", 4)
    assert X.shape == (7, 4, 1) and Y.shape == (7, 4)
    assert np.array_equal(X[2, :, 0], f["x"][2:6])
    assert np.array_equal(Y[6], f["y"][6:10])
    with pytest.raises(FrameTooShortError):
        sliding_windows(f, ["x"], "y", 11)


def test_final_position_windows_use_context():
    f = tiny_frame(20)
    ctx, val = f.rows(0, 12), f.rows(12, 20)
    X, y, rows = final_position_windows(val, ["x"], "y", 4, context=ctx)
    assert len(y) == 8 and list(rows) == list(range(8))
    assert np.array_equal(X[0, :, 0], f["x"][9:13])
    X2, y2, rows2 = final_position_windows(val, ["x"], "y", 4)
    assert len(y2) == 5 and rows2[0] == 3


def test_frame_too_short():
    with pytest.raises(FrameTooShortError):
        train(TINY, TrainConfig(max_epochs=2, patience=1), tiny_frame(4), tiny_frame(4), ["x"], "y")


def test_non_finite_loss_aborts():
    f = tiny_frame(12)
    y = f["y"].copy()
    y[5] = math.nan
    bad = f.with_columns(y=y)
    with pytest.raises(NonFiniteLossError):
        train(TINY, TrainConfig(max_epochs=2, patience=1), bad, f, ["x"], "y")


def rigged(values):
    """Validation stream returning ``values[epoch - 1]`` then repeating the last value."""
    return lambda model, epoch: values[min(epoch, len(values)) - 1]


def test_early_stop_never_improving_after_epoch_one():
    tc = TrainConfig(learning_rate=1e-3, max_epochs=1000, patience=200)
    _, h = train(TINY, tc, tiny_frame(), tiny_frame(), ["x"], "y", val_metric=rigged([1.0, 2.0]))
    assert h.best_epoch == 1
    assert h.stopped_epoch == 1 + 200
    assert len(h.val_loss) == 201


def test_early_stop_after_late_best():
    tc = TrainConfig(learning_rate=1e-3, max_epochs=1000, patience=30)
    stream = [5.0, 4.0, 4.5, 3.0, 3.5, 9.0]
    _, h = train(TINY, tc, tiny_frame(), tiny_frame(), ["x"], "y", val_metric=rigged(stream))
    assert h.best_epoch == 4 and h.stopped_epoch == 34
    assert h.best_val_loss == min(h.val_loss) == 3.0


def test_restores_best_weights():
    f = tiny_frame(40)
    tr, va = f.rows(0, 30), f.rows(30, 40)
    tc = TrainConfig(learning_rate=5e-2, max_epochs=40, patience=39, batch_size=4)
    m, h = train(TINY, tc, tr, va, ["x"], "y")
    X, y, _ = final_position_windows(va, ["x"], "y", 4, context=tr)
    assert rmse_final(m, X, y) == pytest.approx(h.best_val_loss, rel=1e-12)
    assert h.best_val_loss == min(h.val_loss)
    assert h.stopped_epoch <= tc.max_epochs


def test_same_seed_bit_identical_history():
    f = tiny_frame(30)
    tc = TrainConfig(learning_rate=1e-2, max_epochs=15, patience=5, batch_size=3, seed=9)
    cfg = replace(TINY, dropout=0.2)
    _, a = train(cfg, tc, f.rows(0, 20), f.rows(20, 30), ["x"], "y")
    _, b = train(cfg, tc, f.rows(0, 20), f.rows(20, 30), ["x"], "y")
    assert a == b


def test_zero_lr_zero_decay_leaves_weights_unchanged():
    f = tiny_frame(20)
    tc = TrainConfig(learning_rate=0.0, weight_decay=0.0, max_epochs=3, patience=2, seed=4)
    m, _ = train(TINY, tc, f, f, ["x"], "y")
    ref = build_model(TINY, seed=4)
    for (k, a), b in zip(m.state_dict().items(), ref.state_dict().values()):
        assert torch.equal(a, b), k


def test_history_csv(tmp_path):
    h = TrainHistory([0.5, 0.25], [0.3, 0.4], best_epoch=1, stopped_epoch=2)
    h.write_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines() == [
        "epoch,train_mse,val_rmse,is_best",
        "1,0.5,0.3,1",
        "2,0.25,0.4,0",
    ]


def test_overfit_vanilla():
    f = overfit_frame()
    mc, tc = overfit_configs("vanilla")
    m, _ = train(mc, tc, f, f, OVERFIT_INPUTS, "y")
    assert train_rmse(m, f) < 0.02


# ---------------------------------------------------------------------------
# grid search


def fake_train(scores):
    """Training stand-in whose best validation loss is looked up by grid point."""

    def run(mc, tc, train_frame, val_frame, inputs, target):
        key = (mc.layers, mc.heads, tc.batch_size, mc.dropout)
        h = TrainHistory(train_loss=[1.0], val_loss=[scores.get(key, 1.0)], best_epoch=1, stopped_epoch=1)
        return None, h

    return run


def test_singleton_grid():
    g = HyperGrid(layers=(2,), heads=(1,), batch_size=(8,), dropout=(0.1,))
    res = grid_search(g, TINY, TrainConfig(max_epochs=2, patience=1), None, None, ["x"], "y", train_fn=fake_train({}))
    assert (res.model_config.layers, res.model_config.heads, res.train_config.batch_size, res.model_config.dropout) == (2, 1, 8, 0.1)
    assert len(res.leaderboard) == 1


def test_rigged_winner():
    g = HyperGrid(layers=(1, 2), heads=(1,), batch_size=(4,), dropout=(0.1,))
    res = grid_search(g, TINY, TrainConfig(max_epochs=2, patience=1), None, None, ["x"], "y",
                      train_fn=fake_train({(2, 1, 4, 0.1): 0.5, (1, 1, 4, 0.1): 0.9}))
    assert res.model_config.layers == 2
    assert [r.layers for r in res.leaderboard] == [2, 1]


def test_tie_break_order():
    g = HyperGrid(layers=(2, 1), heads=(4, 2), batch_size=(16, 8), dropout=(0.2, 0.1))
    res = grid_search(g, replace(TINY, model_dim=8), TrainConfig(max_epochs=2, patience=1), None, None, ["x"], "y",
                      train_fn=fake_train({}))
    top = res.leaderboard[0]
    assert (top.layers, top.heads, top.batch_size, top.dropout) == (1, 2, 8, 0.1)
    second = res.leaderboard[1]
    assert (second.layers, second.heads, second.batch_size, second.dropout) == (1, 2, 8, 0.2)


def test_reference_winner_is_grid_member():
    assert {"batch_size": 4, "dropout": 0.2, "heads": 4, "layers": 4} in HyperGrid()
    assert {"batch_size": 3, "dropout": 0.2, "heads": 4, "layers": 4} not in HyperGrid()
    assert len(HyperGrid().points()) == 4 * 3 * 5 * 2


def test_point_seeds_distinct_and_stable():
    seeds = [point_seed(7, i) for i in range(120)]
    assert len(set(seeds)) == 120
    assert seeds == [point_seed(7, i) for i in range(120)]


def failing_train(mc, tc, *a):
    raise FrameTooShortError("too short")


def test_grid_errors_carry_coordinates():
    g = HyperGrid(layers=(3,), heads=(1,), batch_size=(4,), dropout=(0.1,))
    with pytest.raises(GridPointError) as e:
        grid_search(g, TINY, TrainConfig(max_epochs=2, patience=1), None, None, ["x"], "y", train_fn=failing_train)
    assert e.value.point == {"layers": 3, "heads": 1, "batch_size": 4, "dropout": 0.1}
    assert "layers" in str(e.value)


def test_parallel_grid_matches_sequential(tmp_path):
    f = tiny_frame(30)
    tr, va = f.rows(0, 22), f.rows(22, 30)
    g = HyperGrid(layers=(1,), heads=(1, 2), batch_size=(4,), dropout=(0.1,))
    tc = TrainConfig(learning_rate=1e-2, max_epochs=6, patience=3)
    mc = replace(TINY, model_dim=4)
    seq = grid_search(g, mc, tc, tr, va, ["x"], "y")
    par = grid_search(g, mc, tc, tr, va, ["x"], "y", workers=2)
    seq.write_leaderboard(tmp_path / "a.csv")
    par.write_leaderboard(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
