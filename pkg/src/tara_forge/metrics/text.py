"""Text-generation metrics.

All metrics share one tokenizer: lowercase, then split on every character
that is not an ASCII letter or digit (punctuation is dropped).
"""

from __future__ import annotations

import math
import re
from collections import Counter
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_refs(references: Sequence[str]) -> None:
    for ref in references:
        if not ref or not ref.strip():
            raise ValueError("empty reference")


def bleu(candidates: Sequence[str], references: Sequence[str], max_order: int = 4) -> float:
    """Corpus BLEU with one reference per candidate.

    Clipped n-gram counts are pooled over the corpus. Orders above 1 use add-one
    smoothing, ``(matches + 1) / (total + 1)``; if no unigram matches at all the
    score is 0. Brevity penalty ``exp(1 - r/c)`` applies when the candidate
    corpus is not longer than the reference corpus.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    _check_refs(references)
    matches = [0] * max_order
    totals = [0] * max_order
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        c, r = tokenize(cand), tokenize(ref)
        cand_len += len(c)
        ref_len += len(r)
        for n in range(1, max_order + 1):
            c_ngrams, r_ngrams = _ngrams(c, n), _ngrams(r, n)
            matches[n - 1] += sum(min(cnt, r_ngrams[g]) for g, cnt in c_ngrams.items())
            totals[n - 1] += max(0, len(c) - n + 1)
    if matches[0] == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_order):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / cand_len)
    return bp * math.exp(log_p / max_order)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F1 between candidate and reference tokens."""
    _check_refs([reference])
    c, r = tokenize(candidate), tokenize(reference)
    lcs = lcs_length(c, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(c), lcs / len(r)
    return 2 * p * rec / (p + rec)


def mean_rouge_l(candidates: Sequence[str], references: Sequence[str]) -> float:
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    if not references:
        return 0.0
    return sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(references)


EmbedFn = Callable[[str], np.ndarray]


def _cached(embed: EmbedFn) -> EmbedFn:
    return lru_cache(maxsize=None)(embed)


def _matrix(items: Sequence[str], embed: EmbedFn) -> np.ndarray:
    return np.vstack([np.asarray(embed(t), dtype=np.float64) for t in items])


def bertscore(candidates: Sequence[str], references: Sequence[str], embed: EmbedFn) -> float:
    """Mean greedy-matching F1 over token embeddings (cosine, clipped at 0).

    ``embed`` maps a token to a unit vector, typically an embedding endpoint.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    _check_refs(references)
    embed = _cached(embed)
    scores = []
    for cand, ref in zip(candidates, references):
        c, r = tokenize(cand), tokenize(ref)
        if not c or not r:
            scores.append(0.0)
            continue
        sim = np.clip(_matrix(c, embed) @ _matrix(r, embed).T, 0.0, 1.0)
        p, rec = sim.max(axis=1).mean(), sim.max(axis=0).mean()
        scores.append(0.0 if p + rec == 0 else float(2 * p * rec / (p + rec)))
    return sum(scores) / len(scores) if scores else 0.0


def earth_mover(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """Optimal transport cost between histograms ``a`` and ``b`` (each sums to 1)."""
    m, n = cost.shape
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport problem failed: {res.message}")
    return float(res.fun)


def moverscore(
    candidates: Sequence[str], references: Sequence[str], embed: EmbedFn, n: int = 1
) -> float:
    """Mean of ``1 - EMD`` between uniform bags of n-gram embeddings, cost ``1 - cos``."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates for {len(references)} references")
    _check_refs(references)
    embed = _cached(embed)
    scores = []
    for cand, ref in zip(candidates, references):
        c = [" ".join(g) for g in _ngrams(tokenize(cand), n).elements()]
        r = [" ".join(g) for g in _ngrams(tokenize(ref), n).elements()]
        if not c or not r:
            scores.append(0.0)
            continue
        cost = np.clip(1.0 - _matrix(c, embed) @ _matrix(r, embed).T, 0.0, 2.0)
        dist = earth_mover(cost, np.full(len(c), 1 / len(c)), np.full(len(r), 1 / len(r)))
        scores.append(min(1.0, max(0.0, 1.0 - dist)))
    return sum(scores) / len(scores) if scores else 0.0
