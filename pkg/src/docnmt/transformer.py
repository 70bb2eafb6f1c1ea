"""Encoder-decoder Transformer (post-norm, sinusoidal positions) hosting the
document-context integration variants."""

from __future__ import annotations

import enum
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import context_integration as ci
from . import nn
from . import tensor as T
from .corpus import BOS, EOS, PAD
from .tensor import ContractError, Tensor

CHECKPOINT_MAGIC = "DOCNMT-CHECKPOINT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class IntegrationMode(str, enum.Enum):
    NONE = "none"
    SINGLE_ENCODER = "single_encoder"
    MULTI_OUTSIDE = "multi_outside"
    MULTI_INSIDE_SEQ = "multi_inside_seq"
    MULTI_INSIDE_PAR = "multi_inside_par"

    @property
    def multi_encoder(self) -> bool:
        return self in (IntegrationMode.MULTI_OUTSIDE, IntegrationMode.MULTI_INSIDE_SEQ,
                        IntegrationMode.MULTI_INSIDE_PAR)

    @property
    def inside_decoder(self) -> bool:
        return self in (IntegrationMode.MULTI_INSIDE_SEQ, IntegrationMode.MULTI_INSIDE_PAR)


CONTEXT_LAYER_CHOICES = (0, 1, 2, 6)


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    d_ff: int = 128
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 2
    dropout: float = 0.1
    label_smoothing: float = 0.1
    max_len: int = 256
    integration_mode: IntegrationMode = IntegrationMode.NONE
    context_encoder_layers: int = 2
    context_positional_encoding: bool = True
    shared_source_embeddings: bool = True
    sequential_order: str = "current_first"
    gate_bias_init: float = -2.0

    def __post_init__(self):
        self.integration_mode = IntegrationMode(self.integration_mode)
        if self.d_model % self.heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.context_encoder_layers not in CONTEXT_LAYER_CHOICES:
            raise ConfigError(f"context_encoder_layers must be one of {CONTEXT_LAYER_CHOICES}")
        if self.sequential_order not in ("current_first", "context_first"):
            raise ConfigError(f"unknown sequential_order {self.sequential_order!r}")
        if self.context_encoder_layers == 0:
            # an embeddings-only context encoder carries no position signal
            self.context_positional_encoding = False

    @classmethod
    def base(cls, src_vocab: int, tgt_vocab: int, **kw) -> "ModelConfig":
        """The 6-layer base Transformer shape."""
        opts = dict(d_model=512, d_ff=2048, heads=8, encoder_layers=6, decoder_layers=6,
                    context_encoder_layers=6)
        opts.update(kw)
        return cls(src_vocab, tgt_vocab, **opts)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["integration_mode"] = self.integration_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def sentence_level(self) -> "ModelConfig":
        d = self.to_dict()
        d["integration_mode"] = IntegrationMode.NONE
        return ModelConfig.from_dict(d)


class TransformerModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params = nn.ParamStore()
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        self.params.add("src_embed", rng.normal(0.0, d ** -0.5, size=(c.src_vocab, d)))
        self.params.add("tgt_embed", rng.normal(0.0, d ** -0.5, size=(c.tgt_vocab, d)))
        for i in range(c.encoder_layers):
            nn.init_encoder_layer(self.params, rng, f"enc.{i}", d, c.d_ff)
        for i in range(c.decoder_layers):
            nn.init_decoder_layer(self.params, rng, f"dec.{i}", d, c.d_ff)
        nn.init_linear(self.params, rng, "out", d, c.tgt_vocab)
        ci.init_context_params(self.params, c, rng)
        self._pos = nn.sinusoidal_positions(c.max_len, d)

    # -- utilities ---------------------------------------------------------

    @property
    def dtype(self):
        return self.params["src_embed"].data.dtype

    def positions(self, n: int) -> np.ndarray:
        return self._pos[:n].astype(self.dtype)

    def to_dtype(self, dtype) -> "TransformerModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        T.zero_grad(self.params.values())

    def context_param_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(ci.CONTEXT_PREFIX)]

    # -- building blocks ---------------------------------------------------

    def encoder_layer(self, prefix: str, x: Tensor, mask, training: bool, rng) -> Tensor:
        ps, c = self.params, self.config
        a = nn.multi_head_attention(ps, f"{prefix}.self", x, x, c.heads, mask)
        x = nn.norm(ps, f"{prefix}.norm1", T.add(x, T.dropout(a, c.dropout, rng, training)))
        f = nn.ffn(ps, f"{prefix}.ffn", x, c.dropout, rng, training)
        return nn.norm(ps, f"{prefix}.norm2", T.add(x, T.dropout(f, c.dropout, rng, training)))

    def _embed(self, table: str, ids: np.ndarray, training: bool, rng) -> Tensor:
        if ids.shape[1] > self.config.max_len:
            raise LengthError(f"sequence of length {ids.shape[1]} exceeds max_len={self.config.max_len}")
        x = T.mul(T.embedding_lookup(self.params[table], ids), math.sqrt(self.config.d_model))
        x = T.add(x, Tensor(self.positions(ids.shape[1])))
        return T.dropout(x, self.config.dropout, rng, training)

    def encode_batch(self, src_ids, training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
        ids = np.asarray(src_ids, dtype=np.int64)
        pad = ids == PAD
        x = self._embed("src_embed", ids, training, rng)
        mask = nn.key_padding_mask(pad, x.data.dtype)
        for i in range(self.config.encoder_layers):
            x = self.encoder_layer(f"enc.{i}", x, mask, training, rng)
        return x, pad

    def decode_batch(self, tgt_in, H: Tensor, src_pad: np.ndarray, bundle: ci.ContextBundle | None = None,
                     training: bool = False, rng=None, gate_clamp=None, record=None) -> Tensor:
        """Teacher-forced decoder pass; returns logits [B, m, V]."""
        ps, c = self.params, self.config
        ids = np.asarray(tgt_in, dtype=np.int64)
        x = self._embed("tgt_embed", ids, training, rng)
        dt = x.data.dtype
        self_mask = nn.causal_mask(ids.shape[1], dt) + nn.key_padding_mask(ids == PAD, dt)
        cur_mask = nn.key_padding_mask(src_pad, dt)
        mode = c.integration_mode
        for i in range(c.decoder_layers):
            p = f"dec.{i}"
            a = nn.multi_head_attention(ps, f"{p}.self", x, x, c.heads, self_mask)
            x = nn.norm(ps, f"{p}.norm1", T.add(x, T.dropout(a, c.dropout, rng, training)))
            if mode is IntegrationMode.MULTI_INSIDE_SEQ:
                a = ci.sequential_attend(self, i, x, H, cur_mask, bundle, gate_clamp, record)
            elif mode is IntegrationMode.MULTI_INSIDE_PAR:
                a = ci.parallel_attend(self, i, x, H, cur_mask, bundle, gate_clamp, record)
            else:
                a = nn.multi_head_attention(ps, f"{p}.cross", x, H, c.heads, cur_mask)
            x = nn.norm(ps, f"{p}.norm2", T.add(x, T.dropout(a, c.dropout, rng, training)))
            f = nn.ffn(ps, f"{p}.ffn", x, c.dropout, rng, training)
            x = nn.norm(ps, f"{p}.norm3", T.add(x, T.dropout(f, c.dropout, rng, training)))
        return nn.lin(ps, "out", x)

    # -- full passes -------------------------------------------------------

    def prepare(self, src_ids, ctx_ids=None, training: bool = False, rng=None, gate_clamp=None, record=None):
        """Run every encoder; returns (decoder memory, source padding, context bundle)."""
        mode = self.config.integration_mode
        src = np.asarray(src_ids, dtype=np.int64)
        bundle = None
        if mode is not IntegrationMode.NONE and ctx_ids is None:
            raise ContractError(f"integration mode {mode.value} needs context input")
        if mode is IntegrationMode.SINGLE_ENCODER:
            src = join_context(np.asarray(ctx_ids, dtype=np.int64), src)
        H, pad = self.encode_batch(src, training, rng)
        if mode.multi_encoder:
            bundle = ci.encode_context(self, ctx_ids, training, rng)
            if mode is IntegrationMode.MULTI_OUTSIDE:
                H = ci.outside_integrate(self, H, bundle, gate_clamp, record)
        return H, pad, bundle

    def logits(self, src_ids, tgt_in, ctx_ids=None, training: bool = False, rng=None, gate_clamp=None,
               record=None) -> Tensor:
        H, pad, bundle = self.prepare(src_ids, ctx_ids, training, rng, gate_clamp, record)
        return self.decode_batch(tgt_in, H, pad, bundle, training, rng, gate_clamp, record)

    def loss(self, batch, training: bool = False, rng=None, label_smoothing: float | None = None,
             reduction: str = "mean", gate_clamp=None) -> Tensor:
        ls = self.config.label_smoothing if label_smoothing is None else label_smoothing
        ctx = batch.ctx if self.config.integration_mode is not IntegrationMode.NONE else None
        lg = self.logits(batch.src, batch.tgt_in, ctx, training, rng, gate_clamp)
        return T.cross_entropy_loss(lg, batch.tgt_out, ls, ignore_index=PAD, reduction=reduction)


def join_context(ctx: np.ndarray, src: np.ndarray) -> np.ndarray:
    """Row-wise ``context _BREAK_ source`` with padding moved to the end."""
    rows = []
    for c, s in zip(ctx, src):
        c = [t for t in c if t != PAD]
        s = [t for t in s if t != PAD]
        rows.append(ci.build_single_encoder_input([c] if c else [], s))
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


# ---------------------------------------------------------------------------
# Single-sentence interface
# ---------------------------------------------------------------------------


def encode(model: TransformerModel, tokens: Sequence[int]) -> Tensor:
    """Eval-mode encoding of one sentence; returns [n, d_model]."""
    H, _ = model.encode_batch(np.asarray([tokens], dtype=np.int64))
    return T.reshape(H, H.shape[1:])


def decode_step(model: TransformerModel, target_prefix: Sequence[int], encoder_outputs, context_bundle=None,
                gate_clamp=None) -> np.ndarray:
    """Next-token distribution after ``target_prefix`` (which starts with BOS).

    ``encoder_outputs`` is the (memory, padding) pair from ``model.prepare``
    or ``encode_batch``.
    """
    if not len(target_prefix) or target_prefix[0] != BOS:
        raise ContractError("target prefix must start with the sentence-begin id")
    if model.config.integration_mode.inside_decoder and context_bundle is None:
        raise ContractError(f"integration mode {model.config.integration_mode.value} needs a context bundle")
    H, pad = encoder_outputs
    lg = model.decode_batch(np.asarray([target_prefix]), H, pad, context_bundle, gate_clamp=gate_clamp)
    return _softmax(lg.data[0, -1].astype(np.float64))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    s = x - x.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _tile(H: Tensor, pad: np.ndarray, bundle, n: int):
    Ht = Tensor(np.repeat(H.data, n, axis=0))
    padt = np.repeat(pad, n, axis=0)
    if bundle is None:
        return Ht, padt, None
    b = ci.ContextBundle(np.repeat(bundle.ids, n, axis=0), np.repeat(bundle.pad, n, axis=0),
                         Tensor(np.repeat(bundle.H_pre.data, n, axis=0)))
    return Ht, padt, b


def beam_search_core(step_logprobs: Callable[[list[list[int]]], np.ndarray], bos: int, eos: int,
                     beam_size: int, max_len: int, alpha: float = 1.0) -> list[int]:
    """Generic beam search.

    ``step_logprobs(prefixes)`` maps a list of BOS-led prefixes to a
    [len(prefixes), V] array of next-token log-probabilities. Hypotheses are
    ranked by total log-probability divided by ``length ** alpha``. Returns
    the best hypothesis without BOS.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    live: list[tuple[float, list[int]]] = [(0.0, [bos])]
    finished: list[tuple[float, list[int]]] = []
    for step in range(max_len):
        lp = step_logprobs([h for _, h in live])
        cands = []
        for (score, hyp), row in zip(live, lp):
            for tok in np.argsort(-row, kind="stable")[: beam_size]:
                if np.isfinite(row[tok]):
                    cands.append((score + float(row[tok]), hyp + [int(tok)]))
        cands.sort(key=lambda c: -c[0])
        live = []
        for score, hyp in cands[:beam_size]:
            if hyp[-1] == eos or step == max_len - 1:
                finished.append((score, hyp))
            else:
                live.append((score, hyp))
        if not live or len(finished) >= beam_size:
            break
    if not finished:
        finished = live
    best = max(finished, key=lambda c: c[0] / (len(c[1]) - 1) ** alpha)
    return best[1][1:]


def beam_search(model: TransformerModel, source: Sequence[int], context: Sequence[int] | None = None,
                beam_size: int = 5, length_penalty_alpha: float = 1.0, max_len: int | None = None) -> list[int]:
    ctx = None if context is None else np.asarray([context], dtype=np.int64)
    H, pad, bundle = model.prepare(np.asarray([source], dtype=np.int64), ctx)
    max_len = max_len or min(model.config.max_len - 1, 2 * len(source) + 10)

    def step(prefixes):
        Ht, padt, bt = _tile(H, pad, bundle, len(prefixes))
        lg = model.decode_batch(np.asarray(prefixes), Ht, padt, bt)
        return _log_softmax(lg.data[:, -1].astype(np.float64))

    return beam_search_core(step, BOS, EOS, beam_size, max_len, length_penalty_alpha)


def greedy_decode(model: TransformerModel, src_ids, ctx_ids=None, max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding; each row stops at its first EOS."""
    src = np.asarray(src_ids, dtype=np.int64)
    H, pad, bundle = model.prepare(src, ctx_ids)
    max_len = max_len or min(model.config.max_len - 1, 2 * src.shape[1] + 10)
    B = src.shape[0]
    prefix = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        lg = model.decode_batch(prefix, H, pad, bundle)
        nxt = lg.data[:, -1].argmax(axis=-1)
        nxt = np.where(done, PAD, nxt)
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in prefix[:, 1:]:
        hyp = []
        for t in row:
            if t == PAD:
                break
            hyp.append(int(t))
            if t == EOS:
                break
        out.append(hyp)
    return out


def count_parameters(model: TransformerModel) -> int:
    return model.params.count()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _dump(header: dict, tensors: dict[str, np.ndarray], path) -> None:
    lines = [CHECKPOINT_MAGIC, f"format_version={CHECKPOINT_VERSION}"]
    for k, v in header.items():
        lines.append(f"{k}={json.dumps(v, sort_keys=True)}")
    for name, arr in tensors.items():
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"param {name} {shape}")
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _load(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    marker = b"\nend_header\n"
    cut = raw.find(marker)
    if not raw.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise CheckpointError(f"{path} is not a checkpoint file")
    lines = raw[:cut].decode("utf-8").split("\n")[1:]
    header, manifest = {}, []
    for line in lines:
        if line.startswith("param "):
            _, name, shape = line.split(" ")
            manifest.append((name, () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))))
        else:
            k, v = line.split("=", 1)
            header[k] = json.loads(v)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    buf = io.BytesIO(raw[cut + len(marker):])
    tensors = {}
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        data = buf.read(4 * n)
        if len(data) != 4 * n:
            raise CheckpointError(f"{path}: truncated data for {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    if buf.read(1):
        raise CheckpointError(f"{path}: trailing bytes after manifest")
    return header, tensors


def save_checkpoint(model: TransformerModel, path, extra: dict | None = None) -> None:
    header = {"config": model.config.to_dict()}
    if extra:
        header.update(extra)
    _dump(header, {k: p.data for k, p in model.params.items()}, path)


def load_checkpoint(path) -> TransformerModel:
    header, tensors = _load(path)
    model = TransformerModel(ModelConfig.from_dict(header["config"]))
    if list(tensors) != list(model.params):
        raise CheckpointError(f"{path}: parameter manifest does not match its config")
    for k, arr in tensors.items():
        p = model.params[k]
        if p.shape != arr.shape:
            raise CheckpointError(f"{path}: {k} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.astype(T.default_dtype())
    return model


def save_arrays(path, arrays: dict[str, np.ndarray], header: dict | None = None) -> None:
    _dump(header or {}, arrays, path)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    return _load(path)
