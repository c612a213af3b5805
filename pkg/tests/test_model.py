import math

import numpy as np
import pytest
import torch
from torch import nn

from oracles import reference_forward
from volspike.model import (
    ModelConfig,
    ModelError,
    NonFiniteError,
    ShapeError,
    SYNTHETIC_VARIANTS,
    Variant,
    attend,
    build_model,
    forward,
    grad_check,
    load_checkpoint,
    parameter_census,
    save_checkpoint,
    synthesize_scores,
)

ALL = list(Variant)
T = torch.tensor


def small(variant, **kw):
    base = dict(variant=variant, layers=2, heads=2, model_dim=16, seq_len=16, dropout=0.0, input_dim=3)
    base.update(kw)
    return ModelConfig(**base)


def test_config_invariants():
    with pytest.raises(ModelError):
        ModelConfig(model_dim=10, heads=4)
    with pytest.raises(ModelError):
        ModelConfig(seq_len=0)
    with pytest.raises(ModelError):
        ModelConfig(seq_len=12, factor_a=5, factor_b=2)
    assert ModelConfig(seq_len=64).factors == (8, 8)
    assert ModelConfig(seq_len=12).factors == (3, 4)
    assert ModelConfig.from_dict(ModelConfig().to_dict()) == ModelConfig()


# ---------------------------------------------------------------------------
# score synthesis and attention


def test_random_zero_gives_zero_scores():
    s = synthesize_scores("random", torch.zeros(3, 2, dtype=torch.float64), {"r": torch.zeros(3, 3, dtype=torch.float64)})
    assert torch.equal(s, torch.zeros(3, 3, dtype=torch.float64))


def test_dense_zero_output_map():
    g = torch.Generator().manual_seed(0)
    X = torch.randn(4, 2, generator=g, dtype=torch.float64)
    p = {
        "w1": torch.randn(2, 2, generator=g, dtype=torch.float64),
        "b1": torch.randn(2, generator=g, dtype=torch.float64),
        "w2": torch.zeros(2, 4, dtype=torch.float64),
        "b2": torch.zeros(4, dtype=torch.float64),
    }
    assert not synthesize_scores("dense", X, p).any()


def vanilla_unit_params():
    one = T([[1.0]], dtype=torch.float64)
    return {"wq": one, "bq": T([0.0], dtype=torch.float64), "wk": 0 * one, "bk": T([1.0], dtype=torch.float64)}


def test_vanilla_hand_example():
    X = T([[1.0], [2.0]], dtype=torch.float64)  # Q = [1, 2], K = [1, 1]
    s = synthesize_scores("vanilla", X, vanilla_unit_params())
    assert s.tolist() == [[1.0, 1.0], [2.0, 2.0]]


def test_mix_random_is_additive():
    X = T([[1.0], [2.0]], dtype=torch.float64)
    R = T([[0.5, -1.0], [3.0, 0.25]], dtype=torch.float64)
    p = {**vanilla_unit_params(), "r": R}
    assert torch.equal(synthesize_scores("mix_random", X, p), synthesize_scores("vanilla", X, p) + R)


def test_attend_examples():
    V = T([[3.0, -1.0]], dtype=torch.float64)
    out, _ = attend(torch.zeros(1, 1, dtype=torch.float64), V)
    assert torch.equal(out, V)

    V = torch.arange(12, dtype=torch.float64).reshape(4, 3)
    out, _ = attend(torch.full((4, 4), 0.7, dtype=torch.float64), V)
    for i in range(4):
        assert torch.allclose(out[i], V[: i + 1].mean(0))

    out, probs = attend(T([[5.0, 9.0], [1.0, 0.0]], dtype=torch.float64), torch.eye(2, dtype=torch.float64))
    assert out[1].tolist() == pytest.approx([0.731059, 0.268941], abs=1e-6)
    assert probs[0].tolist() == [1.0, 0.0]

    with pytest.raises(ShapeError):
        attend(torch.zeros(2, 3), torch.zeros(2, 1))


# ---------------------------------------------------------------------------
# forward contract


@pytest.mark.parametrize("variant", ALL)
def test_output_length_and_causality(variant):
    cfg = small(variant, seq_len=12)
    m = build_model(cfg, seed=1)
    rng = np.random.default_rng(2)
    w = rng.normal(size=(12, 3))
    y = forward(m, w)
    assert y.shape == (12,)
    for t in (0, 5, 11):
        w2 = w.copy()
        w2[t] += rng.normal(size=3) * 5
        y2 = forward(m, w2)
        assert np.array_equal(y[:t], y2[:t])


@pytest.mark.parametrize("variant", ALL)
def test_matches_straight_line_reference(variant):
    cfg = ModelConfig(variant=variant, layers=1, heads=1, model_dim=2, seq_len=4, dropout=0.0, input_dim=3, random_rank=2)
    m = build_model(cfg, seed=11)
    window = np.random.default_rng(5).normal(size=(4, 3))
    state = {k: v.numpy() for k, v in m.state_dict().items()}
    assert forward(m, window) == pytest.approx(reference_forward(state, variant.value, window), abs=1e-12)


def test_shape_and_nonfinite_errors():
    m = build_model(small("dense"), seed=0)
    with pytest.raises(ShapeError):
        forward(m, np.zeros((15, 3)))
    bad = np.zeros((16, 3))
    bad[4, 1] = np.nan
    with pytest.raises(NonFiniteError) as e:
        forward(m, bad)
    assert e.value.layer == 0


def test_dropout_only_in_training():
    m = build_model(small("vanilla", dropout=0.5), seed=0)
    x = torch.randn(2, 16, 3, dtype=torch.float64)
    m.eval()
    assert torch.equal(m(x), m(x))
    m.train()
    assert not torch.equal(m(x), m(x))


# ---------------------------------------------------------------------------
# structural properties


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("variant", ALL)
def test_softmax_rows_sum_to_one(variant, seed):
    cfg = ModelConfig(variant=variant, layers=2, heads=4, model_dim=16, seq_len=64, dropout=0.0, input_dim=2)
    m = build_model(cfg, seed=seed).eval()
    x = torch.randn(3, 64, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        _, maps = m(x, return_attention=True)
    for p in maps:
        assert torch.all((p.sum(-1) - 1).abs() <= 1e-6)
        assert torch.all(p.triu(1) == 0)


def _zero_synthetic(model):
    with torch.no_grad():
        for blk in model.blocks:
            for name, p in blk.attn.score_params.items():
                if name not in ("wq", "bq", "wk", "bk"):
                    p.zero_()


@pytest.mark.parametrize("mix", [Variant.MIX_DENSE, Variant.MIX_RANDOM])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mix_with_zero_synthetic_equals_vanilla_bitwise(mix, seed):
    cfg = ModelConfig(variant=mix, layers=2, heads=2, model_dim=8, seq_len=64, dropout=0.0, input_dim=2)
    mixed = build_model(cfg, seed=seed).eval()
    _zero_synthetic(mixed)
    van = build_model(ModelConfig(**{**cfg.to_dict(), "variant": "vanilla"})).eval()
    van_keys = set(van.state_dict())
    van.load_state_dict({k: v for k, v in mixed.state_dict().items() if k in van_keys})
    x = torch.randn(2, 64, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(seed + 10))
    with torch.no_grad():
        assert torch.equal(mixed(x), van(x))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_factorized_random_full_rank_identity_equals_random(seed):
    N = 64
    cfg = ModelConfig(variant="factorized_random", layers=1, heads=2, model_dim=8, seq_len=N, dropout=0.0, input_dim=2, random_rank=N)
    fr = build_model(cfg, seed=seed).eval()
    with torch.no_grad():
        fr.blocks[0].attn.score_params["r2"].copy_(torch.eye(N, dtype=torch.float64).expand(2, N, N))
    rnd = build_model(ModelConfig(**{**cfg.to_dict(), "variant": "random"})).eval()
    state = {k: v for k, v in fr.state_dict().items() if not k.endswith(("r1", "r2"))}
    state["blocks.0.attn.score_params.r"] = fr.state_dict()["blocks.0.attn.score_params.r1"]
    rnd.load_state_dict(state)
    x = torch.randn(2, N, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        assert torch.equal(fr(x), rnd(x))


def test_parameter_census():
    N, k = 32, 8
    for layers, heads in ((1, 2), (3, 4)):
        cfg = ModelConfig(variant="random", layers=layers, heads=heads, model_dim=16, seq_len=N)
        c = parameter_census(build_model(cfg, seed=0))
        assert c["score_params_per_head_per_layer"] == N * N
        assert c["score_params_total"] == N * N * heads * layers
        cfg = ModelConfig(variant="factorized_random", layers=layers, heads=heads, model_dim=16, seq_len=N, random_rank=k)
        c = parameter_census(build_model(cfg, seed=0))
        assert c["score_params_per_head_per_layer"] == 2 * N * k


# ---------------------------------------------------------------------------
# gradients


def _batch(cfg, seed=0, B=3):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randn(B, cfg.seq_len, cfg.input_dim, dtype=torch.float64, generator=g),
        torch.randn(B, cfg.seq_len, dtype=torch.float64, generator=g),
    )


@pytest.mark.parametrize("variant", ALL)
def test_grad_check_every_variant(variant):
    cfg = small(variant)
    rep = grad_check(build_model(cfg, seed=3), _batch(cfg), samples=4)
    assert rep.max_rel_error <= 1e-4, (rep.worst(), rep.per_tensor)


def _dense_relu_inputs(model, x):
    """Pre-activations of the dense score network's ReLU, single-layer model."""
    cfg = model.cfg
    h = model.embed(x) + model.pos
    xh = h.view(*h.shape[:2], cfg.heads, cfg.head_dim).transpose(1, 2)
    p = model.blocks[0].attn.score_params
    return xh @ p["w1"] + p["b1"].unsqueeze(-2)


def test_grad_check_dense_eps_1e3():
    # Central differences are only a valid oracle where the loss is smooth
    # within +-eps, so the model must keep every ReLU input at least a margin
    # away from its kink. Take the first seed satisfying that and check it.
    cfg = ModelConfig(variant="dense", layers=1, heads=1, model_dim=4, seq_len=8, dropout=0.0, input_dim=2)
    for seed in range(50):
        model = build_model(cfg, seed=seed)
        batch = _batch(cfg, seed, B=1)
        with torch.no_grad():
            margin = _dense_relu_inputs(model, batch[0]).abs().min().item()
        if margin > 0.02:
            break
    else:
        pytest.fail("no kink-free model found")
    rep = grad_check(model, batch, eps=1e-3, samples=8)
    assert rep.max_rel_error <= 1e-4, rep.per_tensor


class _LinearOnly(nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = nn.Linear(3, 1, dtype=torch.float64)
        self.unused = nn.Parameter(torch.ones(4, dtype=torch.float64))

    def forward(self, x):
        return self.lin(x).squeeze(-1)


def test_grad_check_linear_model_and_dead_parameter():
    torch.manual_seed(0)
    m = _LinearOnly()
    x = torch.randn(5, 7, 3, dtype=torch.float64)
    y = torch.randn(5, 7, dtype=torch.float64)
    rep = grad_check(m, (x, y), eps=1e-5, samples=4)
    assert rep.max_rel_error <= 1e-7
    assert rep.per_tensor["unused"] == 0.0
    m.zero_grad()
    torch.mean((m(x) - y) ** 2).backward()
    assert m.unused.grad is None or not m.unused.grad.any()


# ---------------------------------------------------------------------------
# checkpoint


@pytest.mark.parametrize("variant", [Variant.VANILLA, Variant.FACTORIZED_DENSE, Variant.MIX_RANDOM])
def test_checkpoint_round_trip_bit_exact(tmp_path, variant):
    m = build_model(small(variant), seed=4)
    save_checkpoint(tmp_path / "a.bin", m, {"note": "x", "inputs": ["a", "b", "c"]})
    m2, meta = load_checkpoint(tmp_path / "a.bin")
    assert meta == {"note": "x", "inputs": ["a", "b", "c"]}
    assert m2.cfg == m.cfg
    for (k, a), (k2, b) in zip(m.state_dict().items(), m2.state_dict().items()):
        assert k == k2 and a.numpy().tobytes() == b.numpy().tobytes()
    save_checkpoint(tmp_path / "b.bin", m2, meta)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    from volspike.model import CheckpointError

    p = tmp_path / "x.bin"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_synthetic_variants_listing():
    assert Variant.VANILLA not in SYNTHETIC_VARIANTS and len(SYNTHETIC_VARIANTS) == 6
    assert math.isfinite(float(forward(build_model(small("random"), seed=0), np.zeros((16, 3)))[0]))
