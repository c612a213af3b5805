"""Independent reference implementations used only by the tests.

They are written from the formulas, in plain Python/numpy loops, without
calling into the package's numerical code.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# model forward, one sequence, written out position by position


def _layer_norm(v, g, b, eps=1e-5):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + eps) * gi + bi for x, gi, bi in zip(v, g, b)]


def _gelu(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _linear(v, W, b):
    # torch Linear convention: W is (out, in)
    return [sum(W[o][i] * v[i] for i in range(len(v))) + b[o] for o in range(len(b))]


def _row_affine(v, W, b):
    # score-parameter convention: W is (in, out)
    return [sum(v[i] * W[i][o] for i in range(len(v))) + b[o] for o in range(len(b))]


def _softmax_causal(row, i):
    vis = row[: i + 1]
    m = max(vis)
    e = [math.exp(s - m) for s in vis]
    z = sum(e)
    return [x / z for x in e] + [0.0] * (len(row) - i - 1)


def _scores_single_head(variant, X, p):
    """Logits for one head; ``p`` maps names to nested lists for head 0."""
    N = len(X)
    dk = len(X[0])

    def vanilla():
        Q = [_row_affine(x, p["wq"], p["bq"]) for x in X]
        K = [_row_affine(x, p["wk"], p["bk"]) for x in X]
        return [[sum(Q[i][c] * K[j][c] for c in range(dk)) / math.sqrt(dk) for j in range(N)] for i in range(N)]

    def dense():
        out = []
        for x in X:
            h = [max(0.0, z) for z in _row_affine(x, p["w1"], p["b1"])]
            out.append(_row_affine(h, p["w2"], p["b2"]))
        return out

    def random():
        return [list(r) for r in p["r"]]

    def fact_dense():
        out = []
        for x in X:
            h = [max(0.0, z) for z in _row_affine(x, p["w1"], p["b1"])]
            a = _row_affine(h, p["wa"], p["ba"])
            b = _row_affine(h, p["wb"], p["bb"])
            k1 = len(a)
            out.append([a[j % k1] * b[j // k1] for j in range(N)])
        return out

    def fact_random():
        R1, R2 = p["r1"], p["r2"]
        return [[sum(R1[i][c] * R2[j][c] for c in range(len(R1[0]))) for j in range(N)] for i in range(N)]

    def add(A, B):
        return [[a + b for a, b in zip(ra, rb)] for ra, rb in zip(A, B)]

    table = {
        "vanilla": vanilla,
        "dense": dense,
        "random": random,
        "factorized_dense": fact_dense,
        "factorized_random": fact_random,
        "mix_dense": lambda: add(vanilla(), dense()),
        "mix_random": lambda: add(vanilla(), random()),
    }
    return table[variant]()


def reference_forward(state: dict, variant: str, window) -> list[float]:
    """Single-layer, single-head forward pass (eval mode) from a numpy state dict."""
    s = {k: np.asarray(v).tolist() for k, v in state.items()}
    pre = "blocks.0."
    N = len(window)
    h = [
        [e + q for e, q in zip(_linear(list(row), s["embed.weight"], s["embed.bias"]), s["pos"][t])]
        for t, row in enumerate(window)
    ]
    sp = {k[len(pre + "attn.score_params.") :]: v[0] for k, v in s.items() if k.startswith(pre + "attn.score_params.")}
    logits = _scores_single_head(variant, h, sp)
    vals = [_linear(x, s[pre + "attn.value.weight"], s[pre + "attn.value.bias"]) for x in h]
    att = []
    for i in range(N):
        w = _softmax_causal(logits[i], i)
        att.append([sum(w[j] * vals[j][c] for j in range(N)) for c in range(len(vals[0]))])
    att = [_linear(a, s[pre + "attn.proj.weight"], s[pre + "attn.proj.bias"]) for a in att]
    x1 = [_layer_norm([a + b for a, b in zip(h[t], att[t])], s[pre + "norm1.weight"], s[pre + "norm1.bias"]) for t in range(N)]
    out = []
    for t in range(N):
        f = [_gelu(z) for z in _linear(x1[t], s[pre + "ff.0.weight"], s[pre + "ff.0.bias"])]
        f = _linear(f, s[pre + "ff.2.weight"], s[pre + "ff.2.bias"])
        x2 = _layer_norm([a + b for a, b in zip(x1[t], f)], s[pre + "norm2.weight"], s[pre + "norm2.bias"])
        out.append(_linear(x2, s["head.weight"], s["head.bias"])[0])
    return out


# ---------------------------------------------------------------------------
# statistics


def brute_force_ranks(x):
    """Average rank of each element: 1 + (#smaller) + (#equal - 1) / 2."""
    return [1 + sum(y < xi for y in x) + (sum(y == xi for y in x) - 1) / 2 for xi in x]


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def spearman(x, y):
    return pearson(brute_force_ranks(x), brute_force_ranks(y))


# ---------------------------------------------------------------------------
# backtest closed forms


def buy_and_hold_final(closes, capital=10_000.0, fee=0.0):
    units = capital * (1 - fee) / closes[0]
    return units * closes[-1] * (1 - fee)


def running_max_drawdown(equity):
    peak = equity[0]
    worst = 0.0
    for e in equity:
        peak = max(peak, e)
        worst = min(worst, (e / peak - 1) * 100)
    return worst
