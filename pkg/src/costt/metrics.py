"""BLEU, WER/PER and shrink-length statistics."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Hashable, Sequence

from . import kernels


@dataclass(frozen=True)
class EditOps:
    distance: int
    substitutions: int
    insertions: int
    deletions: int


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable]) -> EditOps:
    """Levenshtein distance from reference ``a`` to hypothesis ``b`` with one optimal op breakdown."""
    ids: dict[Hashable, int] = {}
    ra = [ids.setdefault(t, len(ids)) for t in a]
    rb = [ids.setdefault(t, len(ids)) for t in b]
    return EditOps(*kernels.edit_distance(ra, rb))


@dataclass
class ErrorRate:
    rate: float  # percent
    errors: int
    ref_tokens: int
    excluded: int = 0  # samples with an empty reference


def error_rate(hypotheses: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> ErrorRate:
    """Corpus-level error rate: summed edit distance over summed reference length, in percent.

    References of length zero make the rate undefined for that sample; such
    samples are left out and counted in ``excluded``.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    errors = total = excluded = 0
    for h, r in zip(hypotheses, references):
        if not r:
            excluded += 1
            continue
        errors += edit_distance(r, h).distance
        total += len(r)
    if total == 0:
        raise ValueError("every reference is empty; error rate is undefined")
    return ErrorRate(100.0 * errors / total, errors, total, excluded)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    max_n: int = 4,
    smooth: bool = False,
    lowercase: bool = False,
) -> float:
    """Corpus BLEU (0-100) with one reference per segment and the usual brevity penalty.

    Orders with no hypothesis n-grams anywhere in the corpus (every segment
    shorter than n) are dropped from the geometric mean, so BLEU(h, h) = 100
    holds for short segments too. Without ``smooth`` any remaining order with
    zero matches gives 0. With ``smooth``,
    zero-match orders count as ``1 / (2^k * total)`` (k-th such order), the
    exponential-decay smoothing of the NIST tools.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not any(references):
        raise ValueError("at least one non-empty reference is required")
    if lowercase:
        hypotheses = [[t.lower() for t in h] for h in hypotheses]
        references = [[t.lower() for t in r] for r in references]
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    # orders longer than every hypothesis have no candidates at all and are left out
    orders = [(m, t) for m, t in zip(match, total) if t > 0]
    log_p = 0.0
    decay = 1.0
    for m, t in orders:
        if m == 0:
            if not smooth:
                return 0.0
            decay *= 2.0
            log_p += math.log(1.0 / (decay * t))
        else:
            log_p += math.log(m / t)
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / len(orders))


def shrink_stats(errors: Sequence[int], max_k: int = 9) -> list[float]:
    """Cumulative P(|L - T_u| <= k) for k = 0..max_k."""
    if not errors:
        raise ValueError("no shrink errors to summarise")
    n = len(errors)
    return [sum(1 for e in errors if abs(e) <= k) / n for k in range(max_k + 1)]


@dataclass
class EvalReport:
    bleu: float
    wer: float
    per: float | None
    samples: int
    shrink_error_table: list[float] | None = None
    excluded: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self) -> str:
        lines = [f"samples  {self.samples}", f"BLEU     {self.bleu:.2f}", f"WER      {self.wer:.2f}"]
        if self.per is not None:
            lines.append(f"PER      {self.per:.2f}")
        if self.shrink_error_table is not None:
            ks = " ".join(f"{k:>5d}" for k in range(len(self.shrink_error_table)))
            ps = " ".join(f"{p:5.2f}" for p in self.shrink_error_table)
            lines += ["shrink |L - T_u| <= k", f"  k    {ks}", f"  P    {ps}"]
        return "\n".join(lines)
