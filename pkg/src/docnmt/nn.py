"""Parameter containers and the Transformer sublayers shared by all model variants."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore(OrderedDict):
    """Ordered mapping ``name -> Tensor``; insertion order is the manifest order."""

    def add(self, name: str, data) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = T.parameter(np.asarray(data, dtype=T.default_dtype()), name=name)
        self[name] = t
        return t

    def count(self) -> int:
        return sum(p.size for p in self.values())

    def grads(self):
        return {k: p.grad for k, p in self.items()}


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_linear(ps: ParamStore, rng, prefix: str, d_in: int, d_out: int) -> None:
    ps.add(f"{prefix}.W", xavier(rng, d_in, d_out))
    ps.add(f"{prefix}.b", np.zeros(d_out))


def init_layer_norm(ps: ParamStore, prefix: str, d: int) -> None:
    ps.add(f"{prefix}.gain", np.ones(d))
    ps.add(f"{prefix}.bias", np.zeros(d))


def init_attention(ps: ParamStore, rng, prefix: str, d: int) -> None:
    for part in ("q", "k", "v", "o"):
        init_linear(ps, rng, f"{prefix}.{part}", d, d)


def init_ffn(ps: ParamStore, rng, prefix: str, d: int, d_ff: int) -> None:
    init_linear(ps, rng, f"{prefix}.in", d, d_ff)
    init_linear(ps, rng, f"{prefix}.out", d_ff, d)


def init_encoder_layer(ps: ParamStore, rng, prefix: str, d: int, d_ff: int) -> None:
    init_attention(ps, rng, f"{prefix}.self", d)
    init_layer_norm(ps, f"{prefix}.norm1", d)
    init_ffn(ps, rng, f"{prefix}.ffn", d, d_ff)
    init_layer_norm(ps, f"{prefix}.norm2", d)


def init_decoder_layer(ps: ParamStore, rng, prefix: str, d: int, d_ff: int) -> None:
    init_attention(ps, rng, f"{prefix}.self", d)
    init_layer_norm(ps, f"{prefix}.norm1", d)
    init_attention(ps, rng, f"{prefix}.cross", d)
    init_layer_norm(ps, f"{prefix}.norm2", d)
    init_ffn(ps, rng, f"{prefix}.ffn", d, d_ff)
    init_layer_norm(ps, f"{prefix}.norm3", d)


def lin(ps, prefix: str, x: Tensor) -> Tensor:
    return T.linear(x, ps[f"{prefix}.W"], ps[f"{prefix}.b"])


def norm(ps, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, ps[f"{prefix}.gain"], ps[f"{prefix}.bias"])


def ffn(ps, prefix: str, x: Tensor, rate: float, rng, training: bool) -> Tensor:
    h = T.relu(lin(ps, f"{prefix}.in", x))
    h = T.dropout(h, rate, rng, training)
    return lin(ps, f"{prefix}.out", h)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, n, d = x.shape
    return T.transpose(T.reshape(x, (B, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    B, h, n, dk = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, n, h * dk))


def multi_head_attention(
    ps,
    prefix: str,
    query: Tensor,
    memory: Tensor,
    heads: int,
    mask=None,
    record: list | None = None,
) -> Tensor:
    """Multi-head attention from ``query`` [B,m,d] to ``memory`` [B,n,d].

    ``mask`` is additive and broadcastable to ``[B, heads, m, n]``. When
    ``record`` is a list, the attention weights [B,h,m,n] are appended to it.
    """
    Q = _split_heads(lin(ps, f"{prefix}.q", query), heads)
    K = _split_heads(lin(ps, f"{prefix}.k", memory), heads)
    V = _split_heads(lin(ps, f"{prefix}.v", memory), heads)
    out, weights = T.scaled_dot_attention(Q, K, V, mask, return_weights=True)
    if record is not None:
        record.append(weights.data.copy())
    return lin(ps, f"{prefix}.o", _merge_heads(out))


def key_padding_mask(pad: np.ndarray, dtype) -> np.ndarray:
    """Additive mask [B,1,1,n] from a boolean padding array [B,n]."""
    return np.where(pad, T.MASK_VALUE, 0.0).astype(dtype)[:, None, None, :]


def causal_mask(m: int, dtype) -> np.ndarray:
    return np.triu(np.full((m, m), T.MASK_VALUE), k=1).astype(dtype)[None, None]


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
