"""Corpus BLEU and translation edit rate (TER) on tokenised text.

Scores are case-sensitive and computed on whatever tokens are passed in.
"""

from __future__ import annotations

import collections
import math
from typing import Sequence

from .tensor import ContractError

# hypotheses up to this length get an exact shift search; longer ones the
# greedy heuristic
EXACT_SHIFT_MAX_LEN = 6
MAX_SHIFT_SIZE = 10


def _ngrams(tokens: Sequence[str], n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyp: Sequence[str], ref: Sequence[str], max_order: int = 4) -> list[int]:
    """[hyp_len, ref_len, match_1, total_1, ..., match_N, total_N]."""
    stats = [len(hyp), len(ref)]
    for n in range(1, max_order + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        stats.append(sum(min(c, r[g]) for g, c in h.items()))
        stats.append(max(len(hyp) - n + 1, 0))
    return stats


def _score_from_stats(stats: Sequence[float], max_order: int, smooth: bool = False) -> float:
    c, r = stats[0], stats[1]
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_order):
        m, t = stats[2 + 2 * n], stats[3 + 2 * n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_order)


def bleu(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_order: int = 4) -> float:
    """Unsmoothed corpus BLEU in percent."""
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    totals = [0] * (2 + 2 * max_order)
    for h, r in zip(hypotheses, references):
        if not len(r):
            raise ContractError("empty reference")
        for i, v in enumerate(bleu_stats(h, r, max_order)):
            totals[i] += v
    return _score_from_stats(totals, max_order)


def sentence_bleu(hyp: Sequence[str], ref: Sequence[str], max_order: int = 4) -> float:
    """Add-one smoothed sentence BLEU. Diagnostics only."""
    if not len(ref):
        raise ContractError("empty reference")
    return _score_from_stats(bleu_stats(hyp, ref, max_order), max_order, smooth=True)


# ---------------------------------------------------------------------------
# TER
# ---------------------------------------------------------------------------


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Word-level Levenshtein distance (insert, delete, substitute; cost 1).

    Bit-parallel over the reference (Myers/Hyyro), one big-int step per
    hypothesis token.
    """
    m = len(ref)
    if m == 0:
        return len(hyp)
    peq: dict = {}
    for j, tok in enumerate(ref):
        peq[tok] = peq.get(tok, 0) | (1 << j)
    full = (1 << m) - 1
    top = 1 << (m - 1)
    pv, mv, score = full, 0, m
    for tok in hyp:
        eq = peq.get(tok, 0)
        xv = eq | mv
        xh = (((eq & pv) + pv) ^ pv) | eq
        ph = mv | (~(xh | pv) & full)
        mh = pv & xh
        if ph & top:
            score += 1
        elif mh & top:
            score -= 1
        ph = ((ph << 1) | 1) & full
        mh = (mh << 1) & full
        pv = mh | (~(xv | ph) & full)
        mv = ph & xv
    return score


def _alignment(hyp: Sequence, ref: Sequence) -> list[int | None]:
    """For each reference position, the hypothesis position it is aligned to
    (match or substitution) on one minimum-edit path, else None."""
    n, m = len(hyp), len(ref)
    D = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        D[i][0] = i
    for j in range(m + 1):
        D[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            D[i][j] = min(D[i - 1][j] + 1, D[i][j - 1] + 1, D[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]))
    out: list[int | None] = [None] * m
    i, j = n, m
    while i > 0 and j > 0:
        if D[i][j] == D[i - 1][j - 1] + (hyp[i - 1] != ref[j - 1]):
            out[j - 1] = i - 1
            i, j = i - 1, j - 1
        elif D[i][j] == D[i - 1][j] + 1:
            i -= 1
        else:
            j -= 1
    return out


def _shift(seq: tuple, start: int, length: int, dest: int) -> tuple:
    """Move ``seq[start:start+length]`` so it begins at ``dest`` of the remainder."""
    block = seq[start:start + length]
    rest = seq[:start] + seq[start + length:]
    return rest[:dest] + block + rest[dest:]


def _bag_lower_bound(hyp: Sequence, ref: Sequence) -> int:
    # edit distance is at least the unmatched mass of the token multisets,
    # which no reordering changes
    common = sum((collections.Counter(hyp) & collections.Counter(ref)).values())
    return max(len(hyp), len(ref)) - common


def _exact_edits(hyp: tuple, ref: tuple) -> int:
    best = edit_distance(hyp, ref)
    lb = _bag_lower_bound(hyp, ref)
    seen = {hyp}
    frontier = [hyp]
    depth = 0
    n = len(hyp)
    while frontier and depth + 1 + lb < best:
        depth += 1
        nxt = []
        for h in frontier:
            for s in range(n):
                for l in range(1, n - s + 1):
                    for p in range(n - l + 1):
                        if p == s:
                            continue
                        y = _shift(h, s, l, p)
                        if y in seen:
                            continue
                        seen.add(y)
                        best = min(best, depth + edit_distance(y, ref))
                        nxt.append(y)
        frontier = nxt
    return best


def _greedy_edits(hyp: tuple, ref: tuple) -> int:
    shifts = 0
    cur = edit_distance(hyp, ref)
    ref_phrases = {ref[j:j + l] for l in range(1, MAX_SHIFT_SIZE + 1) for j in range(len(ref) - l + 1)}
    while cur > 0:
        align = _alignment(hyp, ref)
        best = None
        n = len(hyp)
        for s in range(n):
            for l in range(1, min(MAX_SHIFT_SIZE, n - s) + 1):
                phrase = hyp[s:s + l]
                if phrase not in ref_phrases:
                    break
                dests = set()
                m = len(ref)
                for j in range(m - l + 1):
                    if ref[j:j + l] != phrase:
                        continue
                    # gaps (0..n) of the original hypothesis next to words
                    # aligned with the phrase's reference position or its neighbours
                    gaps = set()
                    if j == 0:
                        gaps.add(0)
                    if j + l == m:
                        gaps.add(n)
                    for k, off in ((align[j], 0), (align[j], 1)):
                        if k is not None:
                            gaps.add(k + off)
                    if j > 0 and align[j - 1] is not None:
                        gaps.add(align[j - 1] + 1)
                    if j + l < m and align[j + l] is not None:
                        gaps.add(align[j + l])
                    for q in gaps:
                        if s < q < s + l:
                            continue
                        # insertion point in the sequence with the block removed
                        p = q if q <= s else q - l
                        if 0 <= p <= n - l and p != s:
                            dests.add(p)
                for p in sorted(dests):
                    gain = cur - edit_distance(_shift(hyp, s, l, p), ref)
                    if gain > 0 and (best is None or gain > best[0]):
                        best = (gain, s, l, p)
        if best is None:
            break
        gain, s, l, p = best
        hyp = _shift(hyp, s, l, p)
        cur -= gain
        shifts += 1
    return shifts + cur


def ter_edits(hypothesis: Sequence[str], reference: Sequence[str]) -> int:
    """Minimum edits (insertions, deletions, substitutions, block shifts).

    Short hypotheses are searched exhaustively over shift sequences; longer
    ones use greedy shifting that repeatedly applies the shift with the
    largest edit reduction, leftmost first on ties.
    """
    h, r = tuple(hypothesis), tuple(reference)
    if h == r:
        return 0
    if len(h) <= EXACT_SHIFT_MAX_LEN:
        return _exact_edits(h, r)
    return _greedy_edits(h, r)


def ter(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    if not len(reference):
        raise ContractError("empty reference")
    return 100.0 * ter_edits(hypothesis, reference) / len(reference)


def corpus_ter(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Total edits over total reference length, in percent."""
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    edits = length = 0
    for h, r in zip(hypotheses, references):
        if not len(r):
            raise ContractError("empty reference")
        edits += ter_edits(h, r)
        length += len(r)
    return 100.0 * edits / length if length else 0.0


def sentence_ters(hypotheses, references) -> list[float]:
    return [ter(h, r) for h, r in zip(hypotheses, references)]
