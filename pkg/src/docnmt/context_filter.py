"""Word-level filtering of context sentences.

Four methods: drop stopwords, drop the n most frequent words, keep only
named-entity tokens, keep only tokens with selected POS tags. A sentence
that loses every token becomes the single ``_EMPTY_`` token.

Tags come from an external tagger as a CoNLL-style file with three
whitespace-separated columns per line (token, NER tag, POS tag) and a blank
line between sentences.
"""

from __future__ import annotations

import collections
import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import EMPTY_TOKEN

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_STOPLIST = DATA_DIR / "stopwords_en.txt"
DEFAULT_TAGSETS = DATA_DIR / "tagsets.cfg"
DEFAULT_TOP_N = 150

_PUNCT_ONLY = re.compile(r"^[^\w\s]+$")


class MissingAnnotationError(ValueError):
    pass


class ConllFormatError(ValueError):
    pass


class FilterMode(str, enum.Enum):
    NONE = "none"
    STOPWORDS = "stopwords"
    TOP_FREQUENT = "topfreq"
    NAMED_ENTITIES = "ner"
    POS = "pos"


@dataclass
class TaggedSentence:
    tokens: list[str]
    ner_tags: list[str] | None = None
    pos_tags: list[str] | None = None

    def __post_init__(self):
        for name in ("ner_tags", "pos_tags"):
            tags = getattr(self, name)
            if tags is not None and len(tags) != len(self.tokens):
                raise ValueError(f"{name}: {len(tags)} tags for {len(self.tokens)} tokens")

    def subset(self, keep: Sequence[int]) -> "TaggedSentence":
        pick = lambda xs: None if xs is None else [xs[i] for i in keep]
        return TaggedSentence([self.tokens[i] for i in keep], pick(self.ner_tags), pick(self.pos_tags))


def load_stoplist(path=DEFAULT_STOPLIST) -> frozenset[str]:
    words = (l.strip() for l in Path(path).read_text(encoding="utf-8").splitlines())
    return frozenset(w for w in words if w and not w.startswith("#"))


def load_tagsets(path=DEFAULT_TAGSETS) -> dict[str, frozenset[str]]:
    """Parse ``name = TAG TAG ...`` lines."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected name = tags")
        name, tags = line.split("=", 1)
        tagset = frozenset(tags.split())
        if not tagset:
            raise ValueError(f"{path}:{lineno}: empty tagset {name.strip()!r}")
        out[name.strip()] = tagset
    return out


def build_frequency_table(sentences: Iterable[Sequence[str]]) -> dict[str, int]:
    """word -> 1-based rank by descending count, ties lexicographic."""
    counts = collections.Counter(t for s in sentences for t in s)
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return {w: i + 1 for i, w in enumerate(ordered)}


def save_frequency_table(table: dict[str, int], path) -> None:
    ranked = sorted(table, key=table.get)
    Path(path).write_text("".join(w + "\n" for w in ranked), encoding="utf-8")


def load_frequency_table(path) -> dict[str, int]:
    words = Path(path).read_text(encoding="utf-8").splitlines()
    return {w: i + 1 for i, w in enumerate(words) if w}


@dataclass
class FilterSpec:
    """One filtering method plus the resources it needs.

    ``fold_case`` lowercases tokens before stoplist lookup. ``drop_dangling_punct``
    (list-based modes only) removes a punctuation token whose left neighbour
    was removed, so trailing commas and periods go with their word.
    """

    mode: FilterMode = FilterMode.NONE
    n: int = DEFAULT_TOP_N
    stoplist: frozenset[str] | None = None
    frequency_table: dict[str, int] | None = None
    tagset: frozenset[str] | None = None
    fold_case: bool = False
    drop_dangling_punct: bool = True

    def __post_init__(self):
        self.mode = FilterMode(self.mode)
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.tagset is not None and not self.tagset:
            raise ValueError("tagset must be nonempty")

    @classmethod
    def default(cls, mode, **kw) -> "FilterSpec":
        """Spec with the shipped stoplist / tagsets filled in."""
        mode = FilterMode(mode)
        if mode is FilterMode.STOPWORDS and kw.get("stoplist") is None:
            kw["stoplist"] = load_stoplist()
        if mode in (FilterMode.NAMED_ENTITIES, FilterMode.POS) and kw.get("tagset") is None:
            kw["tagset"] = load_tagsets()[mode.value]
        return cls(mode=mode, **kw)


def _entity_type(tag: str) -> str | None:
    if tag in ("O", "", "-"):
        return None
    if len(tag) > 2 and tag[1] in "-_" and tag[0] in "BIESLU":
        return tag[2:]
    return tag


def _is_punct(tok: str) -> bool:
    return bool(_PUNCT_ONLY.match(tok))


def _keep_indices(spec: FilterSpec, sent: TaggedSentence) -> list[int]:
    toks = sent.tokens
    mode = spec.mode
    if mode is FilterMode.NONE:
        return list(range(len(toks)))
    if mode is FilterMode.NAMED_ENTITIES:
        if sent.ner_tags is None:
            raise MissingAnnotationError("named-entity filtering needs NER tags")
        tagset = spec.tagset or load_tagsets()["ner"]
        return [i for i, t in enumerate(sent.ner_tags) if _entity_type(t) in tagset]
    if mode is FilterMode.POS:
        if sent.pos_tags is None:
            raise MissingAnnotationError("POS filtering needs POS tags")
        tagset = spec.tagset or load_tagsets()["pos"]
        return [i for i, t in enumerate(sent.pos_tags) if t in tagset]

    if mode is FilterMode.STOPWORDS:
        if spec.stoplist is None:
            raise MissingAnnotationError("stopword filtering needs a stoplist")
        drop = [(t.lower() if spec.fold_case else t) in spec.stoplist for t in toks]
    else:
        if spec.frequency_table is None:
            raise MissingAnnotationError("frequency filtering needs a frequency table")
        drop = [spec.frequency_table.get(t, spec.n + 1) <= spec.n for t in toks]
    if spec.drop_dangling_punct:
        for i in range(1, len(toks)):
            if drop[i - 1] and _is_punct(toks[i]):
                drop[i] = True
    return [i for i, d in enumerate(drop) if not d]


def filter_sentence(spec: FilterSpec, sent: TaggedSentence) -> TaggedSentence:
    """Filtered sentence with tags carried along; ``_EMPTY_`` if nothing survives."""
    if sent.tokens == [EMPTY_TOKEN]:
        return sent
    keep = _keep_indices(spec, sent)
    if not keep:
        return TaggedSentence(
            [EMPTY_TOKEN],
            None if sent.ner_tags is None else ["O"],
            None if sent.pos_tags is None else ["-NONE-"],
        )
    return sent.subset(keep)


def apply_filter(spec: FilterSpec, sentence) -> list[str]:
    """Filter one context sentence (a TaggedSentence or a plain token list)."""
    if not isinstance(sentence, TaggedSentence):
        sentence = TaggedSentence(list(sentence))
    return filter_sentence(spec, sentence).tokens


def retention_report(spec: FilterSpec, sentences: Iterable) -> float:
    """Fraction of tokens kept; ``_EMPTY_`` placeholders do not count as kept."""
    kept = total = 0
    for s in sentences:
        if not isinstance(s, TaggedSentence):
            s = TaggedSentence(list(s))
        total += len(s.tokens)
        kept += sum(t != EMPTY_TOKEN for t in apply_filter(spec, s))
    return kept / total if total else 1.0


def read_conll(path) -> list[TaggedSentence]:
    """Read token/NER/POS columns. Two-column lines (token, NER) are accepted
    and yield sentences without POS tags."""
    out: list[TaggedSentence] = []
    rows: list[list[str]] = []
    start = 1

    def flush():
        if not rows:
            return
        widths = {len(r) for r in rows}
        if len(widths) != 1:
            raise ConllFormatError(f"{path}:{start}: sentence mixes column counts")
        toks = [r[0] for r in rows]
        ner = [r[1] for r in rows] if widths != {1} else None
        pos = [r[2] for r in rows] if widths == {3} else None
        out.append(TaggedSentence(toks, ner, pos))
        rows.clear()

    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            flush()
            start = lineno + 1
            continue
        if len(parts) > 3:
            raise ConllFormatError(f"{path}:{lineno}: expected at most 3 columns, got {len(parts)}")
        rows.append(parts)
    flush()
    return out


def write_conll(sentences: Iterable[TaggedSentence], path) -> None:
    lines = []
    for s in sentences:
        for i, tok in enumerate(s.tokens):
            cols = [tok]
            if s.ner_tags is not None:
                cols.append(s.ner_tags[i])
                if s.pos_tags is not None:
                    cols.append(s.pos_tags[i])
            lines.append("\t".join(cols))
        lines.append("")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def make_context_filter(spec: FilterSpec):
    """Adapter for ``corpus.make_examples``: ``f(doc, j)`` -> filtered tokens of
    source sentence j, using the document's tags when present."""

    def f(doc, j):
        if doc.tags is not None:
            return filter_sentence(spec, doc.tags[j]).tokens
        return apply_filter(spec, doc.source[j])

    return f
