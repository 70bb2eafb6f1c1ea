"""Qualitative analysis of document-level models.

Workflow: translate a test set with a sentence-level and a document-level
model, score each sentence with TER, keep the cases the document model
improves, and inspect their context attention and gate activations. Human
category labels are stored in a TSV annotation file and summarised per
category. The context-length sweep and plot data (TSV) live here too.
"""

from __future__ import annotations

import json
import math
import tempfile
import tracemalloc
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from .corpus import BOS, EOS, DocumentCorpus, TrainingExample, Vocabulary, bucket_batches, collate
from .tensor import ContractError
from .transformer import IntegrationMode, TransformerModel, greedy_decode

CATEGORIES = ("coreference", "topic_aware_lexical_choice", "not_interpretable")
CATEGORY_LABELS = {
    "coreference": "Coreference",
    "topic_aware_lexical_choice": "Topic-aware lexical choice",
    "not_interpretable": "Not interpretable",
}
NO_GATE = "n/a: integration mode has no gate"
HISTOGRAM_BINS = 20


class NoContextError(ContractError):
    pass


class NoGateError(ContractError):
    pass


class AnnotationParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


# ---------------------------------------------------------------------------
# Translation and case selection
# ---------------------------------------------------------------------------


def _uses_context(model: TransformerModel) -> bool:
    return model.config.integration_mode is not IntegrationMode.NONE


def translate_examples(model: TransformerModel, examples: Sequence[TrainingExample],
                       token_budget: int = 3000) -> list[list[int]]:
    """Greedy translations (ids, EOS stripped) in example order."""
    out: list[list[int] | None] = [None] * len(examples)
    for idx in bucket_batches(examples, token_budget, shuffle=False):
        batch = collate([examples[i] for i in idx], idx)
        ctx = batch.ctx if _uses_context(model) else None
        for i, hyp in zip(idx, greedy_decode(model, batch.src, ctx)):
            out[i] = [t for t in hyp if t != EOS]
    return out  # type: ignore[return-value]


def ter_improved_cases(sent_hyps: Sequence[Sequence[str]], doc_hyps: Sequence[Sequence[str]],
                       refs: Sequence[Sequence[str]]) -> list[tuple[int, float, float]]:
    """(index, sentence-model TER, document-model TER) for every sentence the
    document model strictly improves, largest improvement first."""
    if not (len(sent_hyps) == len(doc_hyps) == len(refs)):
        raise ContractError(f"length mismatch: {len(sent_hyps)}, {len(doc_hyps)}, {len(refs)}")
    cases = []
    for i, (s, d, r) in enumerate(zip(sent_hyps, doc_hyps, refs)):
        ts, td = metrics.ter(s, r), metrics.ter(d, r)
        if td < ts:
            cases.append((i, ts, td))
    cases.sort(key=lambda c: (c[2] - c[1], c[0]))
    return cases


# ---------------------------------------------------------------------------
# Attention traces and gate profiles
# ---------------------------------------------------------------------------


@dataclass
class AttentionTrace:
    """Context attention averaged over layers and heads.

    ``weights[i, j]`` is the attention of query position i on context token
    j. Queries are target positions for inside-decoder modes and source
    positions for the outside mode (the only context attention there).
    """

    example_id: int
    weights: np.ndarray
    query_tokens: list[str]
    context_tokens: list[str]

    def to_dict(self) -> dict:
        return {
            "example_id": self.example_id,
            "shape": list(self.weights.shape),
            "query_tokens": self.query_tokens,
            "context_tokens": self.context_tokens,
            "values": [float(x) for x in self.weights.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionTrace":
        w = np.asarray(d["values"], dtype=np.float64).reshape(d["shape"])
        return cls(d["example_id"], w, list(d["query_tokens"]), list(d["context_tokens"]))


@dataclass
class GateProfile:
    example_id: int
    per_layer: list[float]
    overall: float


def _record_pass(model: TransformerModel, example: TrainingExample, hyp: Sequence[int] | None):
    if not model.config.integration_mode.multi_encoder:
        raise NoContextError(f"integration mode {model.config.integration_mode.value} has no context attention")
    if hyp is None:
        hyp = greedy_decode(model, [example.source], [example.context])[0]
    hyp = [t for t in hyp if t != EOS]
    record: dict = {}
    model.logits(np.asarray([example.source]), np.asarray([[BOS] + hyp]), np.asarray([example.context]),
                 record=record)
    return record, hyp


def _surfaces(ids, vocab: Vocabulary | None) -> list[str]:
    return [vocab.itos[i] if vocab else str(i) for i in ids]


def attention_trace(model: TransformerModel, example: TrainingExample, hyp: Sequence[int] | None = None,
                    example_id: int = 0, src_vocab: Vocabulary | None = None,
                    tgt_vocab: Vocabulary | None = None) -> AttentionTrace:
    """Mean context attention over every layer and head.

    ``hyp`` defaults to the model's own greedy translation. For
    inside-decoder modes there is one row per produced target token.
    """
    record, hyp = _record_pass(model, example, hyp)
    stacks = [w[0] for w in record["ctx_attn"]]  # each [heads, q, c]
    mean = np.mean(np.stack(stacks).astype(np.float64), axis=(0, 1))
    if model.config.integration_mode.inside_decoder:
        mean = mean[: len(hyp)]
        queries = _surfaces(hyp, tgt_vocab)
    else:
        queries = _surfaces(example.source, src_vocab)
    sums = mean.sum(axis=1, keepdims=True)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        mean = mean / sums
    return AttentionTrace(example_id, mean, queries, _surfaces(example.context, src_vocab))


def gate_profile(model: TransformerModel, example: TrainingExample, hyp: Sequence[int] | None = None,
                 example_id: int = 0) -> GateProfile:
    """Mean gate activation per gated layer and overall (channels and positions averaged).

    Inside-decoder gates are averaged over every decoder step, including the
    one that emits EOS, so an empty translation still has a profile.
    """
    if model.config.integration_mode in (IntegrationMode.NONE, IntegrationMode.SINGLE_ENCODER):
        raise NoGateError(f"integration mode {model.config.integration_mode.value} has no gate")
    record, _ = _record_pass(model, example, hyp)
    gates = record["gate"]
    per_layer = [float(np.mean(g, dtype=np.float64)) for g in gates]
    overall = float(np.mean(np.concatenate([g.ravel() for g in gates]), dtype=np.float64))
    return GateProfile(example_id, per_layer, overall)


def write_traces(traces: Sequence[AttentionTrace], path) -> None:
    """One JSON record per line: example id, shape, axis tokens, row-major values."""
    Path(path).write_text("".join(json.dumps(t.to_dict()) + "\n" for t in traces), encoding="utf-8")


def read_traces(path) -> list[AttentionTrace]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [AttentionTrace.from_dict(json.loads(l)) for l in lines if l.strip()]


# ---------------------------------------------------------------------------
# Annotations and category report
# ---------------------------------------------------------------------------


@dataclass
class CaseAnnotation:
    example_id: int
    category: str
    note: str = ""


def read_annotations(path) -> list[CaseAnnotation]:
    """TSV rows ``example_id<TAB>category<TAB>note``; a header row starting
    with ``example_id`` and ``#`` comments are skipped."""
    out = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#") or line.startswith("example_id\t"):
            continue
        parts = line.split("\t")
        if len(parts) < 2:
            raise AnnotationParseError(path, lineno, "expected example_id<TAB>category[<TAB>note]")
        try:
            ex = int(parts[0])
        except ValueError:
            raise AnnotationParseError(path, lineno, f"bad example id {parts[0]!r}") from None
        cat = parts[1].strip()
        if cat not in CATEGORIES:
            raise AnnotationParseError(path, lineno, f"unknown category {cat!r}")
        if ex in seen:
            raise AnnotationParseError(path, lineno, f"example {ex} annotated twice")
        seen.add(ex)
        out.append(CaseAnnotation(ex, cat, "\t".join(parts[2:])))
    return out


def write_annotations(annotations: Sequence[CaseAnnotation], path) -> None:
    rows = ["example_id\tcategory\tnote"]
    rows += [f"{a.example_id}\t{a.category}\t{a.note}" for a in annotations]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")


def category_report(annotations: Sequence[CaseAnnotation], total: int | None = None) -> list[tuple[str, int]]:
    """Rows: one per category, then the TER-improved total (all annotated
    cases) and, when ``total`` is given, the test-set size."""
    counts = {c: 0 for c in CATEGORIES}
    for a in annotations:
        counts[a.category] += 1
    rows = [(CATEGORY_LABELS[c], counts[c]) for c in CATEGORIES]
    rows.append(("Total TER improved", len(annotations)))
    if total is not None:
        rows.append(("Total", total))
    return rows


def format_report(rows) -> str:
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {count:>6}" for name, count in rows) + "\n"


# ---------------------------------------------------------------------------
# Dossiers
# ---------------------------------------------------------------------------


@dataclass
class CaseDossier:
    example_id: int
    context: list[str]
    source: list[str]
    reference: list[str]
    sentence_hyp: list[str]
    document_hyp: list[str]
    sentence_ter: float
    document_ter: float
    trace: AttentionTrace | None = None
    gate: GateProfile | str = NO_GATE

    def to_json(self) -> str:
        d = asdict(self)
        d["trace"] = None if self.trace is None else self.trace.to_dict()
        d["gate"] = asdict(self.gate) if isinstance(self.gate, GateProfile) else self.gate
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CaseDossier":
        d = json.loads(text)
        d["trace"] = None if d["trace"] is None else AttentionTrace.from_dict(d["trace"])
        if isinstance(d["gate"], dict):
            d["gate"] = GateProfile(**d["gate"])
        return cls(**d)

    def __eq__(self, other) -> bool:
        return isinstance(other, CaseDossier) and self.to_json() == other.to_json()


def case_dossier(index: int, examples: Sequence[TrainingExample], refs: Sequence[Sequence[str]],
                 sent_hyps: Sequence[Sequence[int]], doc_hyps: Sequence[Sequence[int]],
                 doc_model: TransformerModel, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> CaseDossier:
    if not 0 <= index < len(examples):
        raise IndexError(f"example index {index} out of range (0..{len(examples) - 1})")
    ex = examples[index]
    s = [tgt_vocab.itos[t] for t in sent_hyps[index]]
    d = [tgt_vocab.itos[t] for t in doc_hyps[index]]
    trace, gate = None, NO_GATE
    if doc_model.config.integration_mode.multi_encoder:
        trace = attention_trace(doc_model, ex, doc_hyps[index], index, src_vocab, tgt_vocab)
        gate = gate_profile(doc_model, ex, doc_hyps[index], index)
    return CaseDossier(
        example_id=index,
        context=[src_vocab.itos[t] for t in ex.context],
        source=[src_vocab.itos[t] for t in ex.source],
        reference=list(refs[index]),
        sentence_hyp=s,
        document_hyp=d,
        sentence_ter=metrics.ter(s, refs[index]),
        document_ter=metrics.ter(d, refs[index]),
        trace=trace,
        gate=gate,
    )


# ---------------------------------------------------------------------------
# Context-length sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    k: int
    variant: str  # "full" or the filter mode
    bleu: float = math.nan
    ter: float = math.nan
    peak_bytes: int = 0
    error: str = ""


def evaluate(model: TransformerModel, examples: Sequence[TrainingExample], tgt_vocab: Vocabulary,
             token_budget: int = 3000) -> tuple[float, float]:
    """Corpus (BLEU, TER) of greedy translations against the example targets."""
    hyps = [tgt_vocab.decode(h) for h in translate_examples(model, examples, token_budget)]
    refs = [tgt_vocab.decode(e.target) for e in examples]
    return metrics.bleu(hyps, refs), metrics.corpus_ter(hyps, refs)


def context_length_sweep(
    sentence_model: TransformerModel,
    template,
    train_corpus: DocumentCorpus,
    dev_corpus: DocumentCorpus,
    test_corpus: DocumentCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    k_values: Sequence[int],
    filter_mode: str = "none",
    steps: int | None = None,
    out_dir=None,
    track_memory: bool = True,
    on_row=None,
) -> list[SweepRow]:
    """One row per k, in the order given.

    k = 0 evaluates ``sentence_model`` itself. Every k > 0 starts a document
    model (``template`` is a TrainConfig) from ``sentence_model``, fine-tunes
    it for ``steps`` steps with a k-sentence context and evaluates it. An
    error at one k is recorded in its row and the sweep moves on.
    """
    from .training import examples_for, train

    if not k_values:
        raise ValueError("k_values must be nonempty")
    variant = "full" if filter_mode in ("none", None) else filter_mode
    rows = []
    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory()
        out_dir = tmp.name
    try:
        for k in k_values:
            row = SweepRow(k, variant)
            if track_memory:
                tracemalloc.start()
            try:
                if k == 0:
                    cfg0 = replace(template, model={**template.model, "integration_mode": "none"})
                    test = examples_for(cfg0, test_corpus, src_vocab, tgt_vocab)
                    row.bleu, row.ter = evaluate(sentence_model, test, tgt_vocab, template.token_budget)
                else:
                    cfg = replace(template, context_sentences=k, filter=filter_mode or "none")
                    tr = examples_for(cfg, train_corpus, src_vocab, tgt_vocab)
                    dv = examples_for(cfg, dev_corpus, src_vocab, tgt_vocab)
                    te = examples_for(cfg, test_corpus, src_vocab, tgt_vocab)
                    res = train(cfg, tr, dv, Path(out_dir) / f"k{k}", src_vocab, tgt_vocab,
                                sentence_checkpoint=sentence_model, max_steps=steps)
                    row.bleu, row.ter = evaluate(res.model, te, tgt_vocab, cfg.token_budget)
            except Exception as e:  # noqa: BLE001 - recorded per row, sweep continues
                row.error = f"{type(e).__name__}: {e}"
            finally:
                if track_memory:
                    row.peak_bytes = tracemalloc.get_traced_memory()[1]
                    tracemalloc.stop()
            rows.append(row)
            if on_row:
                on_row(row)
    finally:
        if tmp is not None:
            tmp.cleanup()
    return rows


def parse_k_range(text: str) -> list[int]:
    """``"0..20"`` -> 0..20 inclusive; also accepts ``"0,1,5"``."""
    if ".." in text:
        a, b = text.split("..", 1)
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------------------
# Plot data
# ---------------------------------------------------------------------------


def write_sweep_tsv(rows: Sequence[SweepRow], path) -> None:
    lines = ["k\tvariant\tbleu\tter\tpeak_bytes\terror"]
    for r in rows:
        lines.append(f"{r.k}\t{r.variant}\t{r.bleu:.4f}\t{r.ter:.4f}\t{r.peak_bytes}\t{r.error}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def gate_histogram(values: Sequence[float], bins: int = HISTOGRAM_BINS) -> list[tuple[float, float, int]]:
    """Equal-width bins over [0, 1]; the last bin is closed on the right."""
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=(0.0, 1.0))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def write_histogram_tsv(hist, path) -> None:
    lines = ["bin_low\tbin_high\tcount"] + [f"{a:.2f}\t{b:.2f}\t{c}" for a, b, c in hist]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_heatmap_tsv(trace: AttentionTrace, path) -> None:
    """Rows are query tokens, columns context tokens."""
    lines = ["\t".join(["query"] + trace.context_tokens)]
    for tok, row in zip(trace.query_tokens, trace.weights):
        lines.append("\t".join([tok] + [f"{x:.6f}" for x in row]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
