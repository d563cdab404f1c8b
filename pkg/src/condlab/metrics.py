"""Captioning metrics: BLEU4, ROUGE-L, CIDEr-D, METEOR-lite.

All four share one tokenization (lowercase, split on anything that is not a
letter or digit) and operate on an :class:`EvalCorpus`.  METEOR-lite runs
exact and Porter-stem matching stages only (no synonym or paraphrase
lookup); output labels carry the "-lite" marker to flag the deviation from
the reference tool.
"""

from __future__ import annotations

import logging
import math
import re
from collections import Counter
from dataclasses import dataclass

from .stem import porter_stem

log = logging.getLogger(__name__)

TOKENIZATION_RULE = "lower_punct"
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class EvalCorpus:
    """Candidate/reference token lists; every item has at least one reference."""

    items: list[tuple[list[str], list[list[str]]]]
    tokenization: str = TOKENIZATION_RULE

    def __post_init__(self):
        if not self.items:
            raise ValueError("EvalCorpus: no items")
        for cand, refs in self.items:
            if not refs:
                raise ValueError("EvalCorpus: item without references")

    @classmethod
    def from_strings(cls, candidates: list[str], references: list[list[str]]) -> "EvalCorpus":
        if len(candidates) != len(references):
            raise ValueError("candidates and references differ in length")
        return cls([(tokenize(c), [tokenize(r) for r in rs]) for c, rs in zip(candidates, references)])


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU4


def bleu4(corpus: EvalCorpus, smooth: bool = False) -> float:
    """Corpus-level BLEU with modified n-gram precisions n=1..4 and the
    closest-reference-length brevity penalty.  No smoothing by default: zero
    overlap at any order gives 0."""
    clipped = [0] * 5
    total = [0] * 5
    cand_len = 0
    eff_ref_len = 0
    for cand, refs in corpus.items:
        cand_len += len(cand)
        eff_ref_len += min((len(r) for r in refs), key=lambda rl: (abs(rl - len(cand)), rl))
        for n in range(1, 5):
            counts = _ngrams(cand, n)
            total[n] += sum(counts.values())
            max_ref = Counter()
            for r in refs:
                for g, c in _ngrams(r, n).items():
                    if c > max_ref[g]:
                        max_ref[g] = c
            clipped[n] += sum(min(c, max_ref[g]) for g, c in counts.items())
    log_p = 0.0
    for n in range(1, 5):
        if smooth:
            p = (clipped[n] + 1.0) / (total[n] + 1.0)
        else:
            p = clipped[n] / total[n] if total[n] else 0.0
        if p == 0.0:
            return 0.0
        log_p += math.log(p)
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len > eff_ref_len else math.exp(1.0 - eff_ref_len / cand_len)
    return bp * math.exp(log_p / 4.0)


# ---------------------------------------------------------------------------
# ROUGE-L


def _lcs_len(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(corpus: EvalCorpus, beta: float = 1.2) -> float:
    """Mean over items of the best-reference LCS F-score (recall-weighted)."""
    scores = []
    for cand, refs in corpus.items:
        best = 0.0
        for ref in refs:
            if not cand or not ref:
                continue
            lcs = _lcs_len(cand, ref)
            if lcs == 0:
                continue
            p = lcs / len(cand)
            r = lcs / len(ref)
            f = (1.0 + beta**2) * p * r / (r + beta**2 * p)
            best = max(best, f)
        scores.append(best)
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# CIDEr-D


def cider_d(corpus: EvalCorpus, sigma: float = 6.0) -> float:
    """Consensus score: TF-IDF n-gram cosine (n=1..4) with clipped candidate
    counts and a Gaussian length penalty, averaged over orders and references,
    scaled by 10, then averaged over items."""
    n_items = len(corpus.items)
    if n_items == 1:
        log.warning("cider_d: single-item corpus, IDF is degenerate (all log(1)=0)")
    df: Counter = Counter()
    for _, refs in corpus.items:
        seen = set()
        for ref in refs:
            for n in range(1, 5):
                seen.update(_ngrams(ref, n))
        df.update(seen)
    log_n = math.log(n_items)

    def tfidf_vec(tokens):
        vecs, norms = [], []
        for n in range(1, 5):
            vec = {
                g: c * (log_n - math.log(max(df[g], 1.0)))
                for g, c in _ngrams(tokens, n).items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(w * w for w in vec.values())))
        return vecs, norms

    item_scores = []
    for cand, refs in corpus.items:
        cvecs, cnorms = tfidf_vec(cand)
        acc = 0.0
        for ref in refs:
            rvecs, rnorms = tfidf_vec(ref)
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma**2))
            per_n = 0.0
            for n in range(4):
                num = sum(min(w, rvecs[n].get(g, 0.0)) * rvecs[n].get(g, 0.0) for g, w in cvecs[n].items())
                if cnorms[n] > 0 and rnorms[n] > 0:
                    per_n += penalty * num / (cnorms[n] * rnorms[n])
            acc += per_n / 4.0
        item_scores.append(10.0 * acc / len(refs))
    return sum(item_scores) / len(item_scores)


# ---------------------------------------------------------------------------
# METEOR-lite


def _align(cand: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Two-stage unigram alignment: exact matches first, Porter stems second.

    Pairing is in-order first-available within each stage, which keeps runs
    contiguous for monotone matches; chunks are counted on the final pairing.
    """
    pairs: list[tuple[int, int]] = []
    used_c = [False] * len(cand)
    used_r = [False] * len(ref)

    def stage(key):
        for i, cw in enumerate(cand):
            if used_c[i]:
                continue
            ck = key(cw)
            for j, rw in enumerate(ref):
                if not used_r[j] and key(rw) == ck:
                    pairs.append((i, j))
                    used_c[i] = True
                    used_r[j] = True
                    break

    stage(lambda w: w)
    stage(porter_stem)
    return sorted(pairs)


def meteor_lite(corpus: EvalCorpus, alpha: float = 0.9) -> float:
    """Unigram F-mean with the standard fragmentation penalty
    0.5 * (chunks/matches)^3; best reference per item, averaged."""
    scores = []
    for cand, refs in corpus.items:
        best = 0.0
        for ref in refs:
            if not cand or not ref:
                continue
            pairs = _align(cand, ref)
            m = len(pairs)
            if m == 0:
                continue
            chunks = 1
            for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
                if c1 != c0 + 1 or r1 != r0 + 1:
                    chunks += 1
            p = m / len(cand)
            r = m / len(ref)
            fmean = p * r / (alpha * p + (1.0 - alpha) * r)
            penalty = 0.5 * (chunks / m) ** 3
            best = max(best, fmean * (1.0 - penalty))
        scores.append(best)
    return sum(scores) / len(scores)


def score_all(corpus: EvalCorpus) -> dict[str, float]:
    return {
        "bleu4": bleu4(corpus),
        "cider_d": cider_d(corpus),
        "meteor_lite": meteor_lite(corpus),
        "rouge_l": rouge_l(corpus),
    }
