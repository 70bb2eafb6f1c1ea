"""Document-context integration: single-encoder concatenation, gated outside
integration, and sequential/parallel context attention inside the decoder.

Context-only parameters live under the reserved ``ctx.`` prefix so a
sentence-level checkpoint maps onto a document model by name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from . import tensor as T
from .corpus import BREAK, PAD
from .tensor import ContractError, DimensionError, Tensor

CONTEXT_PREFIX = "ctx."


class TransferError(ValueError):
    pass


@dataclass
class ContextBundle:
    """Encoded context for one batch.

    ``ids`` [B,c] holds the (already concatenated) context token ids padded
    with PAD, ``pad`` marks padding and ``H_pre`` [B,c,d] is the encoding.
    """

    ids: np.ndarray
    pad: np.ndarray
    H_pre: Tensor

    @property
    def mask(self) -> np.ndarray:
        return nn.key_padding_mask(self.pad, self.H_pre.data.dtype)


def build_single_encoder_input(prev_sentences: Sequence[Sequence], cur_sentence: Sequence, sep=BREAK) -> list:
    """Join context sentences and the current one with a separator token."""
    out: list = []
    for sent in prev_sentences:
        out.extend(sent)
        out.append(sep)
    out.extend(cur_sentence)
    return out


def encode_context(model, ctx_ids, training: bool = False, rng=None) -> ContextBundle:
    """Encode context ids [B,c] (or a flat id list) into ``H_pre``.

    With zero context layers the result is the scaled embedding rows with no
    positional signal, so it is a bag of words.
    """
    cfg = model.config
    ids = np.asarray(ctx_ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    pad = ids == PAD
    if ids.shape[1] == 0 or pad.all(axis=1).any():
        raise ContractError("context must contain at least one token (use _EMPTY_ for pruned context)")
    ps = model.params
    table = ps["src_embed"] if cfg.shared_source_embeddings else ps["ctx.embed"]
    x = T.mul(T.embedding_lookup(table, ids), math.sqrt(cfg.d_model))
    if cfg.context_positional_encoding:
        x = T.add(x, Tensor(model.positions(ids.shape[1])))
    x = T.dropout(x, cfg.dropout, rng, training)
    mask = nn.key_padding_mask(pad, x.data.dtype)
    for i in range(cfg.context_encoder_layers):
        x = model.encoder_layer(f"ctx.enc.{i}", x, mask, training, rng)
    return ContextBundle(ids=ids, pad=pad, H_pre=x)


def gate_combine(H_bar: Tensor, H_cur: Tensor, W_g: Tensor, b_g: Tensor, clamp: float | None = None,
                 record: list | None = None) -> Tensor:
    """``g * H_bar + (1 - g) * H_cur`` with ``g = sigmoid([H_bar; H_cur] W_g + b_g)``.

    ``clamp`` replaces g by a constant (used for ablations); ``record``
    receives the gate activations.
    """
    if H_bar.shape != H_cur.shape:
        raise DimensionError(f"gate_combine: shapes {list(H_bar.shape)} and {list(H_cur.shape)} differ")
    d = H_cur.shape[-1]
    if W_g.shape != (2 * d, d) or b_g.shape != (d,):
        raise DimensionError(f"gate_combine: W_g {list(W_g.shape)} / b_g {list(b_g.shape)} do not fit d={d}")
    if clamp is None:
        g = T.sigmoid(T.linear(T.concat([H_bar, H_cur], axis=-1), W_g, b_g), open_interval=True)
    else:
        g = Tensor(np.full(H_cur.shape, clamp), dtype=H_cur.data.dtype)
    if record is not None:
        record.append(g.data.copy())
    return T.add(T.mul(g, H_bar), T.mul(T.sub(1.0, g), H_cur))


def _gate(ps, prefix: str, H_bar, H_cur, clamp, record):
    gates = None if record is None else record.setdefault("gate", [])
    return gate_combine(H_bar, H_cur, ps[f"{prefix}.gate.W"], ps[f"{prefix}.gate.b"], clamp, gates)


def _ctx_attention(ps, prefix, query, bundle: ContextBundle, heads, record):
    weights = None if record is None else record.setdefault("ctx_attn", [])
    return nn.multi_head_attention(ps, f"{prefix}.attn", query, bundle.H_pre, heads, bundle.mask, weights)


def outside_integrate(model, H_cur: Tensor, bundle: ContextBundle, gate_clamp=None, record=None) -> Tensor:
    """Attend from the current-sentence encoding to the context, then gate."""
    ps = model.params
    H_bar = _ctx_attention(ps, "ctx.out", H_cur, bundle, model.config.heads, record)
    return _gate(ps, "ctx.out", H_bar, H_cur, gate_clamp, record)


def sequential_attend(model, layer: int, Z: Tensor, H_cur: Tensor, cur_mask, bundle: ContextBundle,
                      gate_clamp=None, record=None) -> Tensor:
    """Stacked current/context attention for one decoder layer.

    The output of the first attention is the query of the second; the
    result is the gated mix, before the residual connection.
    """
    ps, heads = model.params, model.config.heads
    prefix = f"ctx.dec.{layer}"
    if model.config.sequential_order == "context_first":
        C = _ctx_attention(ps, prefix, Z, bundle, heads, record)
        A = nn.multi_head_attention(ps, f"dec.{layer}.cross", C, H_cur, heads, cur_mask)
        return _gate(ps, prefix, C, A, gate_clamp, record)
    A = nn.multi_head_attention(ps, f"dec.{layer}.cross", Z, H_cur, heads, cur_mask)
    B = _ctx_attention(ps, prefix, A, bundle, heads, record)
    return _gate(ps, prefix, B, A, gate_clamp, record)


def parallel_attend(model, layer: int, Z: Tensor, H_cur: Tensor, cur_mask, bundle: ContextBundle,
                    gate_clamp=None, record=None) -> Tensor:
    """Independent current and context attentions from ``Z``, gated together."""
    ps, heads = model.params, model.config.heads
    prefix = f"ctx.dec.{layer}"
    A = nn.multi_head_attention(ps, f"dec.{layer}.cross", Z, H_cur, heads, cur_mask)
    B = _ctx_attention(ps, prefix, Z, bundle, heads, record)
    return _gate(ps, prefix, B, A, gate_clamp, record)


def init_context_params(ps: nn.ParamStore, cfg, rng) -> None:
    from .transformer import IntegrationMode

    mode = cfg.integration_mode
    if mode in (IntegrationMode.NONE, IntegrationMode.SINGLE_ENCODER):
        return
    d = cfg.d_model
    if not cfg.shared_source_embeddings:
        ps.add("ctx.embed", rng.normal(0.0, d ** -0.5, size=(cfg.src_vocab, d)))
    for i in range(cfg.context_encoder_layers):
        nn.init_encoder_layer(ps, rng, f"ctx.enc.{i}", d, cfg.d_ff)
    blocks = ["ctx.out"] if mode is IntegrationMode.MULTI_OUTSIDE else [
        f"ctx.dec.{i}" for i in range(cfg.decoder_layers)
    ]
    for prefix in blocks:
        nn.init_attention(ps, rng, f"{prefix}.attn", d)
        ps.add(f"{prefix}.gate.W", nn.xavier(rng, 2 * d, d))
        ps.add(f"{prefix}.gate.b", np.full(d, cfg.gate_bias_init))


def init_from_sentence_model(doc_model, sentence_checkpoint):
    """Copy every parameter shared with a sentence-level model into ``doc_model``.

    ``sentence_checkpoint`` is a model or a checkpoint path. Context-only
    parameters keep their fresh initialisation (gate bias already set so the
    initial gate is small). The sentence model is not modified.
    """
    from .transformer import TransformerModel, load_checkpoint

    src = sentence_checkpoint if isinstance(sentence_checkpoint, TransformerModel) else load_checkpoint(sentence_checkpoint)
    for name, p in src.params.items():
        if name not in doc_model.params:
            continue
        target = doc_model.params[name]
        if target.shape != p.shape:
            raise TransferError(
                f"cannot transfer parameter {name}: shape {list(p.shape)} vs {list(target.shape)}"
            )
        target.data = np.array(p.data, dtype=target.data.dtype, copy=True)
        target.grad = None
    return doc_model
