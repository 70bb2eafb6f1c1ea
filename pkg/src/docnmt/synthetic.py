"""Generated corpora for desk-scale experiments.

``disambiguation_corpus`` builds documents in which one ambiguous source word
can only be translated correctly by looking at a marker word in the previous
sentence. Translation is otherwise word-for-word and monotone.

``news_like_tagged`` produces Zipf-distributed English-looking sentences with
NER/POS tags, for retention statistics of the context filters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .context_filter import TaggedSentence, load_stoplist
from .corpus import Document, DocumentCorpus

AMBIGUOUS = "bank"
MARKERS = ("river", "money")
# translation of AMBIGUOUS after each marker
SENSES = {"river": "UFER", "money": "BANK"}


@dataclass
class DisambiguationSpec:
    n_fillers: int = 40
    sentences_per_doc: int = 5
    min_len: int = 4
    max_len: int = 7
    p_ambiguous: float = 0.6


def _filler_words(n: int) -> list[str]:
    return [f"w{i:02d}" for i in range(n)]


def disambiguation_corpus(n_sentences: int, seed: int = 0, spec: DisambiguationSpec | None = None) -> DocumentCorpus:
    """Documents where sentence i's ``bank`` is translated by the marker of
    sentence i-1 (``river`` -> UFER, ``money`` -> BANK).

    Every sentence carries one marker at a random position; the first
    sentence of a document never contains the ambiguous word. Markers are
    tagged as named entities so NER filtering reduces context to the marker.
    """
    spec = spec or DisambiguationSpec()
    rng = np.random.default_rng(seed)
    fillers = _filler_words(spec.n_fillers)
    docs = []
    made = 0
    while made < n_sentences:
        n = min(spec.sentences_per_doc, n_sentences - made)
        src, tgt, tags = [], [], []
        prev_marker = None
        for i in range(n):
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            words = [fillers[j] for j in rng.integers(0, len(fillers), size=length)]
            marker = MARKERS[int(rng.integers(2))]
            slots = rng.permutation(length)
            words[slots[0]] = marker
            if prev_marker is not None and rng.random() < spec.p_ambiguous:
                words[slots[1]] = AMBIGUOUS
            out = []
            for w in words:
                if w == AMBIGUOUS:
                    out.append(SENSES[prev_marker])
                else:
                    out.append(w.upper())
            src.append(words)
            tgt.append(out)
            tags.append(TaggedSentence(
                list(words),
                ["B-LOC" if w in MARKERS else "O" for w in words],
                ["NN" if w in MARKERS or w == AMBIGUOUS else "JJ" for w in words],
            ))
            prev_marker = marker
        docs.append(Document(f"d{len(docs)}", src, tgt, tags))
        made += n
    return DocumentCorpus(docs)


def ambiguous_positions(corpus: DocumentCorpus) -> list[tuple[int, int]]:
    """(example index, target position) of every ambiguous-word translation,
    in corpus order (one example per sentence)."""
    out = []
    idx = 0
    for doc in corpus.documents:
        for s in doc.source:
            out.extend((idx, j) for j, w in enumerate(s) if w == AMBIGUOUS)
            idx += 1
    return out


# ---------------------------------------------------------------------------
# news-like tagged text
# ---------------------------------------------------------------------------

_CONTENT_POS = ("NN", "NN", "NNS", "JJ", "JJ", "RB", "VBD", "VBZ", "VB", "VBG", "NNP")
_ENTITY_TYPES = ("PERSON", "ORG", "GPE", "DATE", "NORP", "CARDINAL", "LOC", "EVENT")
# rough tags for function words
_FUNCTION_POS = {
    "the": "DT", "a": "DT", "an": "DT", "this": "DT", "that": "IN", "of": "IN", "in": "IN",
    "to": "TO", "and": "CC", "or": "CC", "but": "CC", "is": "VBZ", "was": "VBD", "be": "VB",
    "would": "MD", "will": "MD", "can": "MD", "it": "PRP", "he": "PRP", "she": "PRP", "they": "PRP",
    "we": "PRP", "i": "PRP", "his": "PRP$", "their": "PRP$", "not": "RB", "which": "WDT", "who": "WP",
}


def news_like_tagged(n_sentences: int = 1000, seed: int = 0, n_content: int = 1500) -> list[TaggedSentence]:
    """Sentences mixing stopwords (about 45% of tokens), Zipf-distributed
    content words, punctuation and sparse multi-word entity spans."""
    rng = np.random.default_rng(seed)
    stop = sorted(load_stoplist())
    stop = [w for w in stop if w.isalpha()]
    stop_p = 1.0 / np.arange(1, len(stop) + 1) ** 1.1
    stop_p /= stop_p.sum()
    content = [f"c{i:04d}" for i in range(n_content)]
    content_p = 1.0 / np.arange(1, n_content + 1) ** 1.0
    content_p /= content_p.sum()
    content_pos = [_CONTENT_POS[i % len(_CONTENT_POS)] for i in range(n_content)]
    out = []
    for _ in range(n_sentences):
        length = int(rng.integers(12, 30))
        toks, ner, pos = [], [], []
        while len(toks) < length:
            r = rng.random()
            if r < 0.06:
                etype = _ENTITY_TYPES[int(rng.integers(len(_ENTITY_TYPES)))]
                span = int(rng.integers(1, 4))
                for j in range(span):
                    toks.append(f"E{int(rng.integers(300)):03d}")
                    ner.append(("B-" if j == 0 else "I-") + etype)
                    pos.append("CD" if etype in ("DATE", "CARDINAL") else "NNP")
            elif r < 0.51:
                w = stop[int(rng.choice(len(stop), p=stop_p))]
                toks.append(w)
                ner.append("O")
                pos.append(_FUNCTION_POS.get(w, "IN"))
            elif r < 0.58:
                toks.append(",")
                ner.append("O")
                pos.append(",")
            else:
                k = int(rng.choice(n_content, p=content_p))
                toks.append(content[k])
                ner.append("O")
                pos.append(content_pos[k])
        toks.append(".")
        ner.append("O")
        pos.append(".")
        out.append(TaggedSentence(toks, ner, pos))
    return out


def ambiguous_token_accuracy(model, examples, src_vocab, token_budget: int = 3000) -> float:
    """Share of ambiguous source words whose target translation is the
    model's top prediction under teacher forcing.

    The synthetic translation is word-for-word, so the target position of
    an ambiguous word equals its source position.
    """
    from .corpus import bucket_batches, collate

    amb = src_vocab.stoi[AMBIGUOUS]
    uses_ctx = model.config.integration_mode.value != "none"
    hits = total = 0
    for idx in bucket_batches(examples, token_budget, shuffle=False):
        b = collate([examples[i] for i in idx], idx)
        pred = model.logits(b.src, b.tgt_in, b.ctx if uses_ctx else None).data.argmax(-1)
        mask = b.src == amb
        w = mask.shape[1]
        hits += int((pred[:, :w][mask] == b.tgt_out[:, :w][mask]).sum())
        total += int(mask.sum())
    if total == 0:
        raise ValueError("no ambiguous tokens in the examples")
    return hits / total
