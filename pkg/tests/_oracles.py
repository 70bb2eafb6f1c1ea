"""Independent reference implementations used by the tests.

Nothing here imports the code under test except to build Tensors for the
gradient checks.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np

from docnmt import tensor as T

# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------


def _scalar(fn, arrays, weights):
    out = fn(*[T.Tensor(a) for a in arrays])
    return float(np.sum(out.data.astype(np.float64) * weights))


def grad_check(fn, arrays, eps: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between reverse-mode and central-difference
    gradients of ``sum(fn(*xs) * w)`` for a fixed random ``w``.

    The analytic gradient is taken at the active default precision; the
    finite differences are always evaluated in float64 at the same
    (already rounded) point, so at 32-bit the check measures the backward
    pass rather than the cancellation noise of a float32 difference
    quotient. Relative error is ||a - n|| / max(||a||, ||n||, 1e-8) per input.
    """
    dt = T.default_dtype()
    arrays = [np.asarray(a, dtype=dt) for a in arrays]
    probe = fn(*[T.Tensor(a) for a in arrays])
    w = np.random.default_rng(seed).normal(size=probe.shape)
    xs = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*xs)
    loss = T.tsum(T.mul(out, T.Tensor(w)))
    T.backward(loss)
    ref = [a.astype(np.float64) for a in arrays]
    worst = 0.0
    with T.precision(np.float64):
        for i, a in enumerate(ref):
            num = np.zeros(a.shape, dtype=np.float64)
            for idx in np.ndindex(a.shape):
                plus = [b.copy() for b in ref]
                minus = [b.copy() for b in ref]
                plus[i][idx] += eps
                minus[i][idx] -= eps
                num[idx] = (_scalar(fn, plus, w) - _scalar(fn, minus, w)) / (2 * eps)
            ana = np.zeros_like(num) if xs[i].grad is None else xs[i].grad.astype(np.float64)
            denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-8)
            worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _shape(rng, ndim_max=3, max_elems=24):
    while True:
        nd = int(rng.integers(1, ndim_max + 1))
        shape = tuple(int(s) for s in rng.integers(1, 5, size=nd))
        if int(np.prod(shape)) <= max_elems:
            return shape


def op_cases(rng):
    """name -> callable(rng) returning (fn, [input arrays]) on a random shape.
    Every input has at most 64 elements."""

    def unary(f, positive=False, kink=False):
        def make(r):
            x = r.normal(size=_shape(r))
            if positive:
                x = np.abs(x) + 0.5
            if kink:
                x = _away_from_zero(x)
            return f, [x]
        return make

    def binary(f, positive_b=False):
        def make(r):
            s = _shape(r)
            b_shape = s[int(r.integers(0, len(s))):]  # trailing-dims broadcast
            b = r.normal(size=b_shape)
            if positive_b:
                b = np.abs(b) + 0.5
            return f, [r.normal(size=s), b]
        return make

    def reduce_(f):
        def make(r):
            s = _shape(r)
            axis = int(r.integers(-1, len(s)))
            ax = None if axis == -1 else axis
            keep = bool(r.integers(2))
            return (lambda x: f(x, axis=ax, keepdims=keep)), [r.normal(size=s)]
        return make

    def make_reshape(r):
        s = _shape(r)
        return (lambda x: T.reshape(x, (-1,))), [r.normal(size=s)]

    def make_transpose(r):
        s = _shape(r)
        perm = tuple(r.permutation(len(s)))
        return (lambda x: T.transpose(x, perm)), [r.normal(size=s)]

    def make_swapaxes(r):
        s = (int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 4)))
        return (lambda x: T.swapaxes(x, -1, -2)), [r.normal(size=s)]

    def make_concat(r):
        a, b, c = (int(v) for v in r.integers(1, 4, size=3))
        axis = int(r.integers(0, 2))
        s1 = (a, b) if axis == 1 else (a, c)
        s2 = (a, c) if axis == 1 else (b, c)
        return (lambda x, y: T.concat([x, y], axis=axis)), [r.normal(size=s1), r.normal(size=s2)]

    def make_matmul(r):
        b, m, k, n = (int(v) for v in r.integers(1, 4, size=4))
        return T.matmul, [r.normal(size=(b, m, k)), r.normal(size=(b, k, n))]

    def make_linear(r):
        b, n, di, do = (int(v) for v in r.integers(1, 4, size=4))
        return T.linear, [r.normal(size=(b, n, di)), r.normal(size=(di, do)), r.normal(size=(do,))]

    def make_softmax(r):
        return (lambda x: T.softmax(x, axis=-1)), [r.normal(size=_shape(r))]

    def make_log_softmax(r):
        return (lambda x: T.log_softmax(x, axis=-1)), [r.normal(size=_shape(r))]

    def make_layer_norm(r):
        s = _shape(r)
        d = s[-1] + 2  # width 2 saturates to +-1 and has a vanishing x-gradient
        s = s[:-1] + (d,)
        return T.layer_norm, [r.normal(size=s), r.normal(size=(d,)), r.normal(size=(d,))]

    def make_embedding(r):
        V, d = int(r.integers(2, 6)), int(r.integers(1, 5))
        ids = r.integers(0, V, size=(int(r.integers(1, 4)), int(r.integers(1, 4))))
        return (lambda t: T.embedding_lookup(t, ids)), [r.normal(size=(V, d))]

    def make_cross_entropy(r):
        B, n, V = (int(v) for v in r.integers(1, 4, size=3))
        V += 1
        tgt = r.integers(0, V, size=(B, n))
        ls = float(r.choice([0.0, 0.1]))
        return (lambda x: T.cross_entropy_loss(x, tgt, ls)), [r.normal(size=(B, n, V))]

    def make_attention(r):
        b, m, n, d = (int(v) for v in r.integers(1, 4, size=4))
        mask = np.where(r.random((b, 1, m, n)) < 0.3, T.MASK_VALUE, 0.0)
        mask[..., 0] = 0.0  # at least one visible key per row
        return (lambda q, k, v: T.scaled_dot_attention(q, k, v, mask)), [
            r.normal(size=(b, 1, m, d)), r.normal(size=(b, 1, n, d)), r.normal(size=(b, 1, n, d))]

    def make_dropout(r):
        seed = int(r.integers(1 << 30))
        return (lambda x: T.dropout(x, 0.3, np.random.default_rng(seed), True)), [r.normal(size=_shape(r))]

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, positive_b=True),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "relu": unary(T.relu, kink=True),
        "sigmoid": unary(T.sigmoid),
        "tanh": unary(T.tanh),
        "sum": reduce_(T.tsum),
        "mean": reduce_(T.mean),
        "reshape": make_reshape,
        "transpose": make_transpose,
        "swapaxes": make_swapaxes,
        "concat": make_concat,
        "matmul": make_matmul,
        "linear": make_linear,
        "softmax": make_softmax,
        "log_softmax": make_log_softmax,
        "layer_norm": make_layer_norm,
        "embedding_lookup": make_embedding,
        "cross_entropy": make_cross_entropy,
        "attention": make_attention,
        "dropout": make_dropout,
    }


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def levenshtein(a, b) -> int:
    D = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        prev, D[0] = D[0], i
        for j in range(1, len(b) + 1):
            prev, D[j] = D[j], min(D[j] + 1, D[j - 1] + 1, prev + (a[i - 1] != b[j - 1]))
    return D[len(b)]


def all_shifts(seq):
    n = len(seq)
    for start in range(n):
        for length in range(1, n - start + 1):
            block = seq[start:start + length]
            rest = seq[:start] + seq[start + length:]
            for dest in range(len(rest) + 1):
                if dest != start:
                    yield rest[:dest] + block + rest[dest:]


def ter_brute(hyp, ref) -> float:
    """Exhaustive minimum over any number of block shifts (BFS by shift
    count) plus Levenshtein distance."""
    hyp, ref = tuple(hyp), tuple(ref)
    best = levenshtein(hyp, ref)
    frontier, seen, depth = {hyp}, {hyp}, 0
    while frontier and depth + 1 < best:
        depth += 1
        nxt = set()
        for h in frontier:
            for y in all_shifts(h):
                if y not in seen:
                    seen.add(y)
                    nxt.add(y)
                    best = min(best, depth + levenshtein(y, ref))
        frontier = nxt
    return 100.0 * best / len(ref)


def bleu_brute(hyps, refs, max_order=4) -> float:
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    if c == 0:
        return 0.0
    logs = []
    for n in range(1, max_order + 1):
        match = total = 0
        for h, ref in zip(hyps, refs):
            hg = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(ref[i:i + n]) for i in range(len(ref) - n + 1)]
            left = list(rg)
            for g in hg:
                if g in left:
                    left.remove(g)
                    match += 1
            total += len(hg)
        if match == 0:
            return 0.0
        logs.append(math.log(match / total))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(sum(logs) / max_order)


def sequences(alphabet, max_len, min_len=0):
    for n in range(min_len, max_len + 1):
        yield from itertools.product(alphabet, repeat=n)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


def simulate_schedule(ppls, lr0=1.0, reduce_after=4, stop_after=10, factor=0.7, tol=1e-4):
    """Straight-line simulation: returns (lr per checkpoint, stop index or None)."""
    best = math.inf
    bad = 0
    bad_since_cut = 0
    cuts = 0
    lrs = []
    for i, p in enumerate(ppls):
        if p < best - tol:
            best = p
            bad = 0
            bad_since_cut = 0
        else:
            bad += 1
            bad_since_cut += 1
            if bad_since_cut == reduce_after:
                cuts += 1
                bad_since_cut = 0
        lrs.append(lr0 * factor ** cuts)
        if bad == stop_after:
            return lrs, i
    return lrs, None


def closed_form_parameters(V_src, V_tgt, d, d_ff, n_enc, n_dec) -> int:
    """Base-Transformer parameter count: embeddings, attention blocks with
    biases, FFNs, layer norms and the output projection."""
    attn = 4 * (d * d + d)
    ffn = d * d_ff + d_ff + d_ff * d + d
    ln = 2 * d
    enc = attn + ffn + 2 * ln
    dec = 2 * attn + ffn + 3 * ln
    return V_src * d + V_tgt * d + n_enc * enc + n_dec * dec + d * V_tgt + V_tgt


def unigram_counts(sentences):
    return Counter(t for s in sentences for t in s)


# ---------------------------------------------------------------------------
# context integration: plain-numpy forward passes, written independently of
# the autodiff graph
# ---------------------------------------------------------------------------


def np_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def np_mha(P: dict, prefix: str, query, memory, heads: int, key_pad=None):
    """Multi-head attention for one sequence: query [m,d], memory [n,d]."""
    def lin(part, x):
        return x @ P[f"{prefix}.{part}.W"] + P[f"{prefix}.{part}.b"]

    d = query.shape[-1]
    dk = d // heads
    Q, K, V = lin("q", query), lin("k", memory), lin("v", memory)
    out = np.zeros((query.shape[0], d))
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        scores = Q[:, sl] @ K[:, sl].T / np.sqrt(dk)
        if key_pad is not None:
            scores = np.where(key_pad[None, :], -np.inf, scores)
        out[:, sl] = np_softmax(scores) @ V[:, sl]
    return lin("o", out)


def np_gate(P: dict, prefix: str, H_bar, H_cur):
    g = 1.0 / (1.0 + np.exp(-(np.concatenate([H_bar, H_cur], -1) @ P[f"{prefix}.gate.W"] + P[f"{prefix}.gate.b"])))
    return g * H_bar + (1 - g) * H_cur
