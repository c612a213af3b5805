"""Decoder-only Transformer with pluggable (Synthesizer) attention score functions.

Every head sees its own ``d_k``-wide slice of the residual stream and turns
it into an ``N x N`` matrix of attention logits:

* ``vanilla``            scaled dot product ``Q K^T / sqrt(d_k)``
* ``dense``              ``W2(relu(W1 x_i))`` gives row ``i`` directly
* ``random``             a free ``N x N`` matrix shared across inputs
* ``factorized_dense``   per position, vectors ``a`` (length k1) and ``b`` (length k2)
                         combined as ``a[j % k1] * b[j // k1]`` with ``k1 * k2 = N``
* ``factorized_random``  low-rank ``R1 R2^T``
* ``mix_dense`` / ``mix_random``  vanilla logits plus the synthetic ones

Logits are causally masked and softmaxed row-wise. Everything runs in float64.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

DTYPE = torch.float64


class Variant(str, enum.Enum):
    VANILLA = "vanilla"
    DENSE = "dense"
    RANDOM = "random"
    FACTORIZED_DENSE = "factorized_dense"
    FACTORIZED_RANDOM = "factorized_random"
    MIX_DENSE = "mix_dense"
    MIX_RANDOM = "mix_random"


SYNTHETIC_VARIANTS = tuple(v for v in Variant if v is not Variant.VANILLA)


class ModelError(ValueError):
    pass


class ShapeError(ModelError):
    pass


class NonFiniteError(ModelError, ArithmeticError):
    def __init__(self, layer: int, where: str = "block output"):
        self.layer = layer
        super().__init__(f"non-finite activations in layer {layer} ({where})")


def _factor_pair(n: int) -> tuple[int, int]:
    k1 = max(d for d in range(1, int(math.isqrt(n)) + 1) if n % d == 0)
    return k1, n // k1


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.FACTORIZED_DENSE
    layers: int = 4
    heads: int = 4
    model_dim: int = 64
    seq_len: int = 64
    dropout: float = 0.2
    input_dim: int = 1
    ff_mult: int = 4
    factor_a: int = 0  # 0 -> most balanced divisor pair of seq_len
    factor_b: int = 0
    random_rank: int = 8

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        errors = self.problems()
        if errors:
            raise ModelError("; ".join(errors))

    def problems(self) -> list[str]:
        errs = []
        for name in ("layers", "heads", "model_dim", "seq_len", "input_dim", "ff_mult", "random_rank"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.heads >= 1 and self.model_dim % self.heads:
            errs.append(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0 <= self.dropout < 1:
            errs.append("dropout must be in [0, 1)")
        if (self.factor_a or self.factor_b) and self.factor_a * self.factor_b != self.seq_len:
            errs.append(f"factor_a * factor_b must equal seq_len {self.seq_len}")
        return errs

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def factors(self) -> tuple[int, int]:
        if self.factor_a and self.factor_b:
            return self.factor_a, self.factor_b
        return _factor_pair(self.seq_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**dict(d))


# ---------------------------------------------------------------------------
# score synthesis + attention


def _affine(x, w, b):
    return x @ w + b.unsqueeze(-2)


def _vanilla(x, p):
    q = _affine(x, p["wq"], p["bq"])
    k = _affine(x, p["wk"], p["bk"])
    return q @ k.transpose(-1, -2) / math.sqrt(x.shape[-1])


def _dense(x, p):
    return _affine(F.relu(_affine(x, p["w1"], p["b1"])), p["w2"], p["b2"])


def _random(x, p):
    r = p["r"]
    return r.expand(*x.shape[:-2], *r.shape[-2:])


def _factorized_dense(x, p):
    hidden = F.relu(_affine(x, p["w1"], p["b1"]))
    a = _affine(hidden, p["wa"], p["ba"])  # (..., N, k1)
    b = _affine(hidden, p["wb"], p["bb"])  # (..., N, k2)
    k1, k2 = a.shape[-1], b.shape[-1]
    # column j pairs a[j % k1] with b[j // k1]: every (a, b) combination once
    return a.repeat(*([1] * (a.dim() - 1)), k2) * b.repeat_interleave(k1, dim=-1)


def _factorized_random(x, p):
    r = p["r1"] @ p["r2"].transpose(-1, -2)
    return r.expand(*x.shape[:-2], *r.shape[-2:])


_SYNTH = {
    Variant.VANILLA: _vanilla,
    Variant.DENSE: _dense,
    Variant.RANDOM: _random,
    Variant.FACTORIZED_DENSE: _factorized_dense,
    Variant.FACTORIZED_RANDOM: _factorized_random,
}

PARAM_SHAPES = {
    "vanilla": lambda dk, n, k1, k2, r: {"wq": (dk, dk), "bq": (dk,), "wk": (dk, dk), "bk": (dk,)},
    "dense": lambda dk, n, k1, k2, r: {"w1": (dk, dk), "b1": (dk,), "w2": (dk, n), "b2": (n,)},
    "random": lambda dk, n, k1, k2, r: {"r": (n, n)},
    "factorized_dense": lambda dk, n, k1, k2, r: {
        "w1": (dk, dk), "b1": (dk,), "wa": (dk, k1), "ba": (k1,), "wb": (dk, k2), "bb": (k2,)
    },
    "factorized_random": lambda dk, n, k1, k2, r: {"r1": (n, r), "r2": (n, r)},
}


def score_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Per-head shapes of the score parameters for ``cfg.variant``."""
    args = (cfg.head_dim, cfg.seq_len, *cfg.factors, min(cfg.random_rank, cfg.seq_len))
    v = cfg.variant
    if v is Variant.MIX_DENSE:
        return {**PARAM_SHAPES["vanilla"](*args), **PARAM_SHAPES["dense"](*args)}
    if v is Variant.MIX_RANDOM:
        return {**PARAM_SHAPES["vanilla"](*args), **PARAM_SHAPES["random"](*args)}
    return PARAM_SHAPES[v.value](*args)


def synthesize_scores(variant: Variant | str, X: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Pre-softmax attention logits for head input ``X`` of shape ``(..., N, d_k)``.

    ``params`` holds the head's tensors (see :func:`score_param_shapes`); a
    leading heads axis broadcasts against ``X``'s heads axis.
    """
    variant = Variant(variant)
    if variant is Variant.MIX_DENSE:
        return _vanilla(X, params) + _dense(X, params)
    if variant is Variant.MIX_RANDOM:
        return _vanilla(X, params) + _random(X, params)
    return _SYNTH[variant](X, params)


def causal_mask(n: int, device=None) -> torch.Tensor:
    """Boolean ``(n, n)`` mask, True where attention is blocked (j > i)."""
    return torch.ones(n, n, dtype=torch.bool, device=device).triu(1)


def attend(scores: torch.Tensor, V: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Causally masked softmax attention. Returns ``(output, probabilities)``."""
    n = scores.shape[-1]
    if scores.shape[-2] != n or V.shape[-2] != n:
        raise ShapeError(f"scores {tuple(scores.shape)} incompatible with values {tuple(V.shape)}")
    probs = torch.softmax(scores.masked_fill(causal_mask(n, scores.device), float("-inf")), dim=-1)
    return probs @ V, probs


# ---------------------------------------------------------------------------
# modules


def _uniform(shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.empty(shape, dtype=DTYPE).uniform_(-bound, bound))


class SynthesizerAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        h, d, dk = cfg.heads, cfg.model_dim, cfg.head_dim
        self.score_params = nn.ParameterDict()
        for name, shape in score_param_shapes(cfg).items():
            if name in ("r", "r1", "r2"):
                p = nn.Parameter(torch.randn((h, *shape), dtype=DTYPE) * 0.02)
            elif len(shape) == 2:
                p = _uniform((h, *shape), shape[0])
            else:
                p = _uniform((h, *shape), dk)
            self.score_params[name] = p
        self.value = nn.Linear(d, d, dtype=DTYPE)
        self.proj = nn.Linear(d, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, N, d = x.shape
        h, dk = self.cfg.heads, self.cfg.head_dim
        if N != self.cfg.seq_len:
            raise ShapeError(f"sequence length {N} != configured seq_len {self.cfg.seq_len}")
        xh = x.view(B, N, h, dk).transpose(1, 2)
        scores = synthesize_scores(self.cfg.variant, xh, dict(self.score_params))
        v = self.value(x).view(B, N, h, dk).transpose(1, 2)
        out, probs = attend(scores, v)
        return self.proj(out.transpose(1, 2).reshape(B, N, d)), probs


class DecoderBlock(nn.Module):
    """Masked attention -> add & norm -> feed-forward -> add & norm."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.model_dim
        self.attn = SynthesizerAttention(cfg)
        self.drop1 = nn.Dropout(cfg.dropout)
        self.norm1 = nn.LayerNorm(d, dtype=DTYPE)
        self.ff = nn.Sequential(
            nn.Linear(d, cfg.ff_mult * d, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(cfg.ff_mult * d, d, dtype=DTYPE),
        )
        self.drop2 = nn.Dropout(cfg.dropout)
        self.norm2 = nn.LayerNorm(d, dtype=DTYPE)

    def forward(self, x):
        a, probs = self.attn(x)
        x = self.norm1(x + self.drop1(a))
        x = self.norm2(x + self.drop2(self.ff(x)))
        return x, probs


class VolatilityTransformer(nn.Module):
    """Maps a ``(batch, seq_len, input_dim)`` window to one prediction per position.

    The output at position ``t`` is the forecast for the day after row ``t``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.embed = nn.Linear(cfg.input_dim, d, dtype=DTYPE)
        self.pos = nn.Parameter(torch.randn(cfg.seq_len, d, dtype=DTYPE) * 0.02)
        self.blocks = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.layers))
        self.head = nn.Linear(d, 1, dtype=DTYPE)

    def forward(self, x: torch.Tensor, return_attention: bool = False):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 3 or x.shape[1] != self.cfg.seq_len or x.shape[2] != self.cfg.input_dim:
            raise ShapeError(
                f"expected (batch, {self.cfg.seq_len}, {self.cfg.input_dim}), got {tuple(x.shape)}"
            )
        h = self.embed(x) + self.pos
        maps = []
        for i, block in enumerate(self.blocks):
            h, probs = block(h)
            if not torch.isfinite(h).all():
                raise NonFiniteError(i)
            maps.append(probs)
        y = self.head(h).squeeze(-1)
        if squeeze:
            y = y.squeeze(0)
        return (y, maps) if return_attention else y


def build_model(cfg: ModelConfig, seed: int | None = None) -> VolatilityTransformer:
    if seed is None:
        return VolatilityTransformer(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return VolatilityTransformer(cfg)


def predict_windows(model: nn.Module, windows: np.ndarray) -> np.ndarray:
    """Evaluate ``model`` (eval mode, no grad) on ``(W, N, F)`` windows -> ``(W, N)``."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(torch.as_tensor(np.asarray(windows, dtype=np.float64)))
    finally:
        model.train(was_training)
    return out.numpy()


def forward(model: nn.Module, window: np.ndarray) -> np.ndarray:
    """Predictions for a single ``(seq_len, input_dim)`` window."""
    return predict_windows(model, np.asarray(window)[None])[0]


def parameter_census(model: VolatilityTransformer) -> dict[str, int]:
    """Score-function parameters per head per layer, by tensor name, plus totals."""
    cfg = model.cfg
    per_head = {name: int(np.prod(shape)) for name, shape in score_param_shapes(cfg).items()}
    return {
        **per_head,
        "score_params_per_head_per_layer": sum(per_head.values()),
        "score_params_total": sum(per_head.values()) * cfg.heads * cfg.layers,
        "total": sum(p.numel() for p in model.parameters()),
    }


# ---------------------------------------------------------------------------
# gradient check


def mse_loss(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return torch.mean((model(x) - y) ** 2)


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    checked: int = 0

    def worst(self) -> str:
        return max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else ""


def grad_check(
    model: nn.Module,
    batch: tuple[torch.Tensor, torch.Tensor],
    eps: float = 1e-5,
    samples: int = 6,
    seed: int = 0,
    loss_fn: Callable = mse_loss,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients to central differences on sampled coordinates.

    Relative error is ``|g - fd| / max(|g|, |fd|, floor)``; ``floor`` keeps
    round-off on near-zero gradients from dominating.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x, y = batch
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0)
    try:
        model.zero_grad(set_to_none=True)
        loss_fn(model, x, y).backward()
        for name, p in model.named_parameters():
            analytic = p.grad.detach().reshape(-1).clone() if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
            flat = p.data.view(-1)
            k = min(samples, flat.numel())
            idx = rng.choice(flat.numel(), size=k, replace=False)
            worst = 0.0
            with torch.no_grad():
                for i in idx:
                    orig = flat[i].item()
                    flat[i] = orig + eps
                    up = loss_fn(model, x, y).item()
                    flat[i] = orig - eps
                    down = loss_fn(model, x, y).item()
                    flat[i] = orig
                    fd = (up - down) / (2 * eps)
                    g = analytic[i].item()
                    err = abs(g - fd) / max(abs(g), abs(fd), floor)
                    worst = max(worst, err)
            report.per_tensor[name] = worst
            report.checked += k
        report.max_rel_error = max(report.per_tensor.values(), default=0.0)
    finally:
        model.zero_grad(set_to_none=True)
        model.train(was_training)
    return report


# ---------------------------------------------------------------------------
# checkpoint container
#
# layout: MAGIC | u64 little-endian header length | UTF-8 JSON header | tensor bytes
# tensors are little-endian float64, C order, in header order.

MAGIC = b"VOLSPIKE-CKPT\n"
FORMAT_VERSION = 1


class CheckpointError(ModelError):
    pass


def save_checkpoint(path, model: VolatilityTransformer, meta: Mapping | None = None) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8")
        raw = arr.tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "meta": dict(meta or {}),
        "tensors": tensors,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[VolatilityTransformer, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a volspike checkpoint")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    header = json.loads(data[pos : pos + hlen])
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    model = VolatilityTransformer(ModelConfig.from_dict(header["config"]))
    state = {}
    for t in header["tensors"]:
        start = pos + t["offset"]
        arr = np.frombuffer(data[start : start + t["nbytes"]], dtype=t["dtype"]).reshape(t["shape"])
        state[t["name"]] = torch.from_numpy(arr.astype(np.float64))
    model.load_state_dict(state)
    return model, header["meta"]


def with_variant(cfg: ModelConfig, variant: Variant | str) -> ModelConfig:
    return replace(cfg, variant=Variant(variant))
