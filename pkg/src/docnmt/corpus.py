"""Document-aware parallel corpora: tokenisation, vocabulary, BPE, context
windows and token-budget batching bucketed by (current, context) length.

Corpus files hold one sentence per line (UTF-8). A ``.docs`` index next to
them lists ``doc_id<TAB>start_line<TAB>end_line`` with 0-based, end-exclusive
line ranges.
"""

from __future__ import annotations

import collections
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

PAD, UNK, BOS, EOS, BREAK, EMPTY, DOCBOUND = range(7)
RESERVED = ("<pad>", "<unk>", "<s>", "</s>", "_BREAK_", "_EMPTY_", "_DOCBOUND_")
BREAK_TOKEN, EMPTY_TOKEN, DOCBOUND_TOKEN = RESERVED[4:7]
EOW = "</w>"
BUCKET_WIDTH = 8
DEFAULT_TOKEN_BUDGET = 3000


class OversizeError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


_PUNCT = re.compile(r"([^\w\s])")


def tokenize(line: str) -> list[str]:
    """Whitespace split with punctuation detached into separate tokens.

    Reserved markers such as ``_BREAK_`` survive intact.
    """
    out = []
    for chunk in line.split():
        if chunk in RESERVED:
            out.append(chunk)
            continue
        out.extend(t for t in _PUNCT.sub(r" \1 ", chunk).split() if t)
    return out


class Vocabulary:
    """Bijective token/id map. Ids 0-6 are the reserved tokens in ``RESERVED``."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            out.append(self.itos[i])
        return out

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        counts = collections.Counter(t for s in sentences for t in s)
        ordered = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                         key=lambda t: (-counts[t], t))
        return cls(ordered)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


# ---------------------------------------------------------------------------
# Documents
# ---------------------------------------------------------------------------


@dataclass
class Document:
    doc_id: str
    source: list[list[str]]
    target: list[list[str]]
    tags: list | None = None  # optional per-source-sentence TaggedSentence

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise CorpusFormatError(
                f"document {self.doc_id}: {len(self.source)} source vs {len(self.target)} target sentences"
            )


@dataclass
class DocumentCorpus:
    documents: list[Document] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(d.source) for d in self.documents)

    def source_sentences(self) -> Iterator[list[str]]:
        for d in self.documents:
            yield from d.source

    def target_sentences(self) -> Iterator[list[str]]:
        for d in self.documents:
            yield from d.target

    @classmethod
    def load(cls, src_path, tgt_path, docs_path=None, tokenizer: Callable = tokenize) -> "DocumentCorpus":
        src = [tokenizer(l) for l in Path(src_path).read_text(encoding="utf-8").splitlines()]
        tgt = [tokenizer(l) for l in Path(tgt_path).read_text(encoding="utf-8").splitlines()]
        if len(src) != len(tgt):
            raise CorpusFormatError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
        ranges = read_docs_index(docs_path, len(src)) if docs_path else [("0", 0, len(src))]
        return cls([Document(i, src[a:b], tgt[a:b]) for i, a, b in ranges])

    def save(self, src_path, tgt_path, docs_path) -> None:
        lines_s, lines_t, index = [], [], []
        for d in self.documents:
            start = len(lines_s)
            lines_s.extend(" ".join(s) for s in d.source)
            lines_t.extend(" ".join(t) for t in d.target)
            index.append(f"{d.doc_id}\t{start}\t{len(lines_s)}")
        Path(src_path).write_text("".join(l + "\n" for l in lines_s), encoding="utf-8")
        Path(tgt_path).write_text("".join(l + "\n" for l in lines_t), encoding="utf-8")
        Path(docs_path).write_text("".join(l + "\n" for l in index), encoding="utf-8")


def read_docs_index(path, n_lines: int | None = None) -> list[tuple[str, int, int]]:
    out = []
    prev_end = 0
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusFormatError(f"{path}:{lineno}: expected doc_id<TAB>start<TAB>end")
        doc_id, a, b = parts[0], int(parts[1]), int(parts[2])
        if a != prev_end or b < a:
            raise CorpusFormatError(f"{path}:{lineno}: document ranges must be contiguous and ordered")
        prev_end = b
        out.append((doc_id, a, b))
    if n_lines is not None and prev_end != n_lines:
        raise CorpusFormatError(f"{path}: index covers {prev_end} lines, corpus has {n_lines}")
    return out


# ---------------------------------------------------------------------------
# Byte pair encoding
# ---------------------------------------------------------------------------


def _word_symbols(word: str) -> tuple[str, ...]:
    return tuple(word) + (EOW,)


def learn_bpe(sentences: Iterable[Sequence[str]], num_merges: int) -> list[tuple[str, str]]:
    """Learn merge operations from tokenised sentences.

    Pass both sides of a parallel corpus to learn a joint model. The most
    frequent adjacent pair wins; ties go to the lexicographically smallest.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_counts = collections.Counter(w for s in sentences for w in s)
    vocab = {_word_symbols(w): c for w, c in word_counts.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: collections.Counter = collections.Counter()
        for sym, c in vocab.items():
            for a, b in zip(sym, sym[1:]):
                pairs[a, b] += c
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        vocab = {_merge_word(sym, best): c for sym, c in vocab.items()}
    return merges


def _merge_word(sym: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    while i < len(sym):
        if i + 1 < len(sym) and sym[i] == pair[0] and sym[i + 1] == pair[1]:
            out.append(sym[i] + sym[i + 1])
            i += 2
        else:
            out.append(sym[i])
            i += 1
    return tuple(out)


class BPE:
    def __init__(self, merges: Sequence[tuple[str, str]]):
        self.merges = list(merges)
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache: dict[str, tuple[str, ...]] = {}

    def segment_word(self, word: str) -> tuple[str, ...]:
        if word in RESERVED:
            return (word,)
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        sym = _word_symbols(word)
        while len(sym) > 1:
            ranked = [(self.ranks[p], p) for p in zip(sym, sym[1:]) if p in self.ranks]
            if not ranked:
                break
            sym = _merge_word(sym, min(ranked)[1])
        # glue the end-of-word marker onto the final unit
        if sym[-1] == EOW and len(sym) > 1:
            sym = sym[:-2] + (sym[-2] + EOW,)
        self._cache[word] = sym
        return sym

    def apply(self, sentence: Sequence[str]) -> list[str]:
        return [u for w in sentence for u in self.segment_word(w)]

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "BPE":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                a, b = line.split(" ")
                merges.append((a, b))
        return cls(merges)


def apply_bpe(merges, sentence: Sequence[str]) -> list[str]:
    bpe = merges if isinstance(merges, BPE) else BPE(merges)
    return bpe.apply(sentence)


def undo_bpe(units: Sequence[str]) -> list[str]:
    words, cur = [], ""
    for u in units:
        if u in RESERVED:
            words.append(u)
            continue
        cur += u
        if cur.endswith(EOW):
            words.append(cur[: -len(EOW)])
            cur = ""
    if cur:
        words.append(cur)
    return words


# ---------------------------------------------------------------------------
# Training examples
# ---------------------------------------------------------------------------


@dataclass
class TrainingExample:
    context: list[int]
    source: list[int]
    target: list[int]
    doc_id: str = ""
    index: int = 0  # sentence position within its document

    @property
    def key(self) -> tuple[str, int]:
        return (self.doc_id, self.index)


def context_window(sentences: Sequence[Sequence], i: int, k: int, doc_bound=DOCBOUND, sep=BREAK) -> list:
    """Context for sentence ``i``: up to ``k`` previous sentences joined by
    ``sep``; each sentence missing before the document start becomes one
    ``doc_bound`` token."""
    if k <= 0:
        return []
    parts: list[list] = [[doc_bound]] * max(0, k - i)
    parts += [list(s) for s in sentences[max(0, i - k):i]]
    out: list = []
    for j, p in enumerate(parts):
        if j:
            out.append(sep)
        out.extend(p)
    return out


def make_examples(
    corpus: DocumentCorpus,
    k: int,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    context_filter: Callable[[Document, int], list[str]] | None = None,
    bpe: BPE | None = None,
) -> list[TrainingExample]:
    """Build one example per sentence with a ``k``-sentence source context.

    ``context_filter(doc, j)`` returns the (word-level) tokens of source
    sentence ``j`` to use when it appears as context; it never touches the
    current sentence. BPE, when given, is applied after filtering.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    seg = bpe.apply if bpe is not None else list
    out = []
    for doc in corpus.documents:
        ctx_sents = []
        for j in range(len(doc.source)):
            words = context_filter(doc, j) if context_filter else doc.source[j]
            ctx_sents.append(src_vocab.encode(seg(words)))
        for i, (s, t) in enumerate(zip(doc.source, doc.target)):
            out.append(TrainingExample(
                context=context_window(ctx_sents, i, k),
                source=src_vocab.encode(seg(s)),
                target=tgt_vocab.encode(seg(t)),
                doc_id=doc.doc_id,
                index=i,
            ))
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray  # [B, n]
    ctx: np.ndarray | None  # [B, c]
    tgt_in: np.ndarray  # [B, m] starting with BOS
    tgt_out: np.ndarray  # [B, m] ending with EOS
    indices: list[int]

    @property
    def rows(self) -> int:
        return self.src.shape[0]

    @property
    def n_target_tokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def pad_rows(rows: Sequence[Sequence[int]], width: int | None = None) -> np.ndarray:
    width = max((len(r) for r in rows), default=0) if width is None else width
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def collate(examples: Sequence[TrainingExample], indices: Sequence[int] = ()) -> Batch:
    ctx = None
    if any(e.context for e in examples):
        ctx = pad_rows([e.context for e in examples])
    return Batch(
        src=pad_rows([e.source for e in examples]),
        ctx=ctx,
        tgt_in=pad_rows([[BOS] + e.target for e in examples]),
        tgt_out=pad_rows([e.target + [EOS] for e in examples]),
        indices=list(indices),
    )


def _bucket(n: int, width: int = BUCKET_WIDTH) -> int:
    return max(1, math.ceil(n / width))


def example_cost(ex: TrainingExample) -> tuple[int, int]:
    """(source-side tokens, target-side tokens) of one example, unpadded."""
    return len(ex.source) + len(ex.context), len(ex.target) + 1


def bucket_batches(
    examples: Sequence[TrainingExample],
    token_budget: int = DEFAULT_TOKEN_BUDGET,
    seed: int = 0,
    shuffle: bool = True,
    bucket_width: int = BUCKET_WIDTH,
) -> list[list[int]]:
    """Group example indices into batches.

    Examples share a batch only if they fall into the same
    (current-length, context-length) bucket. Per batch, rows times the padded
    source+context width and rows times the padded target width both stay
    within ``token_budget``. With ``shuffle`` the order inside buckets and
    the order of batches are permuted by a generator seeded with ``seed``.
    """
    rng = np.random.default_rng(seed)
    buckets: dict[tuple[int, int], list[int]] = collections.defaultdict(list)
    for i, ex in enumerate(examples):
        src_cost, tgt_cost = example_cost(ex)
        if max(src_cost, tgt_cost) > token_budget:
            raise OversizeError(
                f"example {i} (doc {ex.doc_id!r}, sentence {ex.index}) needs {max(src_cost, tgt_cost)} "
                f"tokens, budget is {token_budget}"
            )
        buckets[_bucket(len(ex.source), bucket_width), _bucket(len(ex.context), bucket_width)].append(i)
    batches: list[list[int]] = []
    for key in sorted(buckets):
        idx = buckets[key]
        if shuffle:
            idx = [idx[j] for j in rng.permutation(len(idx))]
        cur: list[int] = []
        w_src = w_tgt = 0
        for i in idx:
            s, t = example_cost(examples[i])
            ns, nt = max(w_src, s), max(w_tgt, t)
            if cur and (len(cur) + 1) * max(ns, nt) > token_budget:
                batches.append(cur)
                cur, ns, nt = [], s, t
            cur.append(i)
            w_src, w_tgt = ns, nt
        if cur:
            batches.append(cur)
    if shuffle:
        batches = [batches[j] for j in rng.permutation(len(batches))]
    return batches


def padded_tokens(examples: Sequence[TrainingExample], batch: Sequence[int]) -> int:
    rows = [examples[i] for i in batch]
    ws = max(len(e.source) + len(e.context) for e in rows)
    wt = max(len(e.target) + 1 for e in rows)
    return len(rows) * max(ws, wt)
