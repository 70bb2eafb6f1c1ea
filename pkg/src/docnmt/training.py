"""Optimisation: Adam, the perplexity-plateau learning-rate schedule, early
stopping, checkpointing and the sentence -> document two-stage protocol.

Experiment configs are flat ``key = value`` text files. Keys are either
``TrainConfig`` fields or ``ModelConfig`` fields (vocabulary sizes are taken
from the data). Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .context_integration import init_from_sentence_model
from .corpus import (
    DEFAULT_TOKEN_BUDGET,
    DocumentCorpus,
    TrainingExample,
    Vocabulary,
    bucket_batches,
    collate,
    make_examples,
)
from .transformer import (
    ConfigError,
    IntegrationMode,
    ModelConfig,
    TransformerModel,
    load_arrays,
    load_checkpoint,
    save_arrays,
    save_checkpoint,
)

PATIENCE_REDUCE = 4
PATIENCE_STOP = 10
LR_DECAY = 0.7
IMPROVE_TOL = 1e-4


class NumericalError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    token_budget: int = DEFAULT_TOKEN_BUDGET
    checkpoint_interval: int = 500
    max_steps: int = 100_000
    patience_reduce: int = PATIENCE_REDUCE
    patience_stop: int = PATIENCE_STOP
    lr_decay: float = LR_DECAY
    improve_tol: float = IMPROVE_TOL
    seed: int = 0
    context_sentences: int = 1  # k
    filter: str = "none"
    filter_n: int = 150
    require_pretrained: bool = True
    train_prefix: str = ""
    dev_prefix: str = ""
    tags: str = ""  # optional CoNLL file for the training source side
    dev_tags: str = ""
    model: dict = field(default_factory=dict)  # ModelConfig overrides

    def model_config(self, src_vocab: int, tgt_vocab: int) -> ModelConfig:
        return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, **self.model)

    @property
    def integration_mode(self) -> IntegrationMode:
        return IntegrationMode(self.model.get("integration_mode", IntegrationMode.NONE))


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    train_defaults = TrainConfig()
    model_defaults = {f.name: f.default for f in fields(ModelConfig) if f.name not in ("src_vocab", "tgt_vocab")}
    train_fields = {f.name for f in fields(TrainConfig)} - {"model"}
    values, model = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        try:
            if key in train_fields:
                values[key] = _coerce(val, getattr(train_defaults, key))
            elif key in model_defaults:
                model[key] = _coerce(val, model_defaults[key])
            else:
                raise ConfigError(f"unknown key {key!r}")
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    cfg = TrainConfig(**values, model=model)
    ModelConfig(src_vocab=8, tgt_vocab=8, **model)  # validate early
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {v}" for k, v in asdict(cfg).items() if k != "model"]
    for k, v in cfg.model.items():
        lines.append(f"{k} = {v.value if isinstance(v, IntegrationMode) else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Optimiser state and schedule
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    step: int = 0
    lr0: float = 3e-4
    reductions: int = 0
    best_ppl: float = math.inf
    since_improve: int = 0  # checkpoints since the last improvement
    since_reduce: int = 0  # resets on improvement and on each reduction
    dropout: float = 0.1
    decay: float = LR_DECAY
    epoch: int = 0
    batch_in_epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def lr(self) -> float:
        return self.lr0 * self.decay ** self.reductions


def schedule_update(state: TrainState, ppl: float, patience_reduce: int = PATIENCE_REDUCE,
                    patience_stop: int = PATIENCE_STOP, tol: float = IMPROVE_TOL) -> tuple[TrainState, bool]:
    """Advance the plateau schedule by one validation checkpoint.

    Returns the new state and whether training should stop. A checkpoint
    improves when ``ppl < best - tol``.
    """
    s = replace(state)
    if ppl < s.best_ppl - tol:
        s.best_ppl = ppl
        s.since_improve = 0
        s.since_reduce = 0
        return s, False
    s.since_improve += 1
    s.since_reduce += 1
    if s.since_reduce >= patience_reduce:
        s.reductions += 1
        s.since_reduce = 0
    return s, s.since_improve >= patience_stop


def adam_step(params, state: TrainState, lr: float | None = None, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter with a gradient.

    ``params`` maps names to Tensors; moments live in ``state.m``/``state.v``
    and ``state.step`` is incremented. Raises NumericalError on a non-finite
    gradient before touching anything.
    """
    lr = state.lr if lr is None else lr
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        dt = p.data.dtype
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (beta1 * m + (1 - beta1) * g).astype(dt)
        v = (beta2 * v + (1 - beta2) * g * g).astype(dt)
        state.m[name], state.v[name] = m, v
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(dt)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def perplexity(model: TransformerModel, examples: Sequence[TrainingExample],
               token_budget: int = DEFAULT_TOKEN_BUDGET) -> float:
    """exp(summed token cross-entropy without smoothing / target tokens)."""
    total = 0.0
    count = 0
    for batch_idx in bucket_batches(examples, token_budget, shuffle=False):
        batch = collate([examples[i] for i in batch_idx], batch_idx)
        loss = model.loss(batch, training=False, label_smoothing=0.0, reduction="sum")
        total += float(loss.data)
        count += batch.n_target_tokens
    return math.exp(total / count) if count else math.inf


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TransformerModel
    checkpoint: Path
    best_checkpoint: Path
    log: list[dict]
    stopped_early: bool


def _save_state(state: TrainState, path) -> None:
    header = {k: v for k, v in asdict(state).items() if k not in ("m", "v")}
    if math.isinf(header["best_ppl"]):
        header["best_ppl"] = None
    arrays = {f"m.{k}": a for k, a in state.m.items()}
    arrays.update({f"v.{k}": a for k, a in state.v.items()})
    save_arrays(path, arrays, {"train_state": header})


def _load_state(path) -> TrainState:
    header, arrays = load_arrays(path)
    h = dict(header["train_state"])
    if h["best_ppl"] is None:
        h["best_ppl"] = math.inf
    s = TrainState(**h)
    for k, a in arrays.items():
        kind, name = k.split(".", 1)
        (s.m if kind == "m" else s.v)[name] = a
    return s


def _epoch_batches(examples, cfg: TrainConfig, epoch: int):
    return bucket_batches(examples, cfg.token_budget, seed=cfg.seed * 100_003 + epoch)


def train(
    cfg: TrainConfig,
    train_examples: Sequence[TrainingExample],
    dev_examples: Sequence[TrainingExample],
    out_dir,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    sentence_checkpoint=None,
    resume: bool = False,
    max_steps: int | None = None,
) -> TrainResult:
    """Train until early stopping or ``max_steps``.

    Writes into ``out_dir``: ``model.ckpt`` (latest), ``best.ckpt``,
    ``optim.state``, ``train.log`` (one JSON record per checkpoint with
    step, loss, ppl, lr), ``train.cfg`` and the two vocabularies. With
    ``resume`` the run continues from the files already there and follows
    the same trajectory as an uninterrupted run.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = cfg.integration_mode
    if mode is not IntegrationMode.NONE and sentence_checkpoint is None and cfg.require_pretrained and not resume:
        raise ConfigError(
            f"integration mode {mode.value} needs a sentence-level checkpoint "
            "(or set require_pretrained = false)"
        )
    max_steps = cfg.max_steps if max_steps is None else max_steps
    ckpt, best_ckpt, state_path, log_path = (out / n for n in ("model.ckpt", "best.ckpt", "optim.state", "train.log"))

    if resume:
        model = load_checkpoint(ckpt)
        state = _load_state(state_path)
        log = [json.loads(l) for l in log_path.read_text().splitlines() if l.strip()]
    else:
        model = TransformerModel(cfg.model_config(len(src_vocab), len(tgt_vocab)), seed=cfg.seed)
        if sentence_checkpoint is not None:
            init_from_sentence_model(model, sentence_checkpoint)
        state = TrainState(lr0=cfg.lr, dropout=model.config.dropout, decay=cfg.lr_decay)
        log = []
        log_path.write_text("")
        (out / "train.cfg").write_text(dump_config(cfg))
        src_vocab.save(out / "src.vocab")
        tgt_vocab.save(out / "tgt.vocab")

    params = model.params
    batches = _epoch_batches(train_examples, cfg, state.epoch)
    losses: list[float] = []
    stopped = False
    while state.step < max_steps:
        if state.batch_in_epoch >= len(batches):
            state.epoch += 1
            state.batch_in_epoch = 0
            batches = _epoch_batches(train_examples, cfg, state.epoch)
        idx = batches[state.batch_in_epoch]
        state.batch_in_epoch += 1
        batch = collate([train_examples[i] for i in idx], idx)
        rng = np.random.default_rng([cfg.seed, state.step])
        model.zero_grad()
        loss = model.loss(batch, training=True, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericalError(f"training loss is {value} at step {state.step + 1}; last good checkpoint: {ckpt}")
        T.backward(loss)
        adam_step(params, state, state.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        losses.append(value)
        if state.step % cfg.checkpoint_interval == 0 or state.step == max_steps:
            ppl = perplexity(model, dev_examples, cfg.token_budget)
            improved = ppl < state.best_ppl - cfg.improve_tol
            record = {"step": state.step, "loss": float(np.mean(losses)), "ppl": ppl, "lr": state.lr}
            state, stop = schedule_update(state, ppl, cfg.patience_reduce, cfg.patience_stop, cfg.improve_tol)
            losses = []
            log.append(record)
            with open(log_path, "a") as f:
                f.write(json.dumps(record) + "\n")
            save_checkpoint(model, ckpt, {"step": state.step})
            if improved:
                shutil.copyfile(ckpt, best_ckpt)
            _save_state(state, state_path)
            if stop:
                stopped = True
                break
    if not best_ckpt.exists() and ckpt.exists():
        shutil.copyfile(ckpt, best_ckpt)
    return TrainResult(model, ckpt, best_ckpt, log, stopped)


# ---------------------------------------------------------------------------
# Data helpers
# ---------------------------------------------------------------------------


def build_vocabularies(corpus: DocumentCorpus) -> tuple[Vocabulary, Vocabulary]:
    return Vocabulary.build(corpus.source_sentences()), Vocabulary.build(corpus.target_sentences())


def examples_for(cfg: TrainConfig, corpus: DocumentCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                 frequency_table=None) -> list[TrainingExample]:
    """Examples with the config's context window and context filter."""
    from .context_filter import FilterMode, FilterSpec, build_frequency_table, make_context_filter

    k = cfg.context_sentences if cfg.integration_mode is not IntegrationMode.NONE else 0
    flt = None
    if cfg.filter != FilterMode.NONE.value and k > 0:
        if cfg.filter == FilterMode.TOP_FREQUENT.value and frequency_table is None:
            frequency_table = build_frequency_table(corpus.source_sentences())
        spec = FilterSpec.default(cfg.filter, n=cfg.filter_n, frequency_table=frequency_table)
        flt = make_context_filter(spec)
    return make_examples(corpus, k, src_vocab, tgt_vocab, flt)
