"""Corpus BLEU and repetition rate over token sequences."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from .errors import DataError

Tokens = Sequence[Hashable]


@dataclass(frozen=True)
class BleuReport:
    score: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def __str__(self) -> str:
        ps = "/".join(f"{100 * p:.1f}" for p in self.precisions)
        return (f"BLEU = {self.score:.2f} {ps} (BP={self.brevity_penalty:.3f} "
                f"hyp_len={self.hyp_len} ref_len={self.ref_len})")


def ngram_counts(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_order: int = 4) -> BleuReport:
    """Case-sensitive corpus BLEU, single reference, no smoothing.

    Clipped n-gram matches and totals are summed over the corpus before the
    precisions are formed.  If any precision is zero the score is zero.  An
    order that neither side has any n-grams of (every sentence shorter than
    n) counts as fully matched, so BLEU(h, h) is 100 for short h too.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise DataError("empty hypothesis set")
    matches = [0] * max_order
    totals = [0] * max_order
    ref_totals = [0] * max_order
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_order + 1):
            h, r = ngram_counts(hyp, n), ngram_counts(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
            ref_totals[n - 1] += max(len(ref) - n + 1, 0)
    precisions = tuple(m / t if t else float(rt == 0)
                       for m, t, rt in zip(matches, totals, ref_totals))
    if hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / max(hyp_len, 1))
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuReport(score, precisions, bp, hyp_len, ref_len)


@dataclass(frozen=True)
class RepetitionRateReport:
    rate: float
    ratios: tuple[float, ...]
    window: int


def repetition_rate(text: Tokens, window: int = 1000, max_order: int = 4) -> RepetitionRateReport:
    """Geometric mean over n of the share of n-gram types seen more than once.

    The text is cut into consecutive non-overlapping windows of ``window``
    words (a text shorter than one window is a single window; words past the
    last full window are dropped).  Per window and order the ratio is
    non-singleton types / all types, or 0 when the window has no n-grams of
    that order; ratios are averaged over windows.
    """
    if len(text) == 0:
        raise DataError("empty text")
    if window <= 0:
        raise DataError("window must be positive")
    if len(text) <= window:
        chunks = [text]
    else:
        chunks = [text[i:i + window] for i in range(0, len(text) - window + 1, window)]
    ratios = []
    for n in range(1, max_order + 1):
        acc = 0.0
        for chunk in chunks:
            counts = ngram_counts(chunk, n)
            if counts:
                acc += sum(1 for c in counts.values() if c > 1) / len(counts)
        ratios.append(acc / len(chunks))
    if min(ratios) == 0.0:
        rate = 0.0
    else:
        rate = 100.0 * math.exp(sum(math.log(r) for r in ratios) / max_order)
    return RepetitionRateReport(rate, tuple(ratios), window)
