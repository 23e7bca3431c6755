import itertools
import json
import math

import numpy as np
import pytest

from costt.metrics import EvalReport, corpus_bleu, edit_distance, error_rate, shrink_stats
from costt.pipeline import evaluate


def brute_edit_distance(a, b):
    """Cheapest edit script by trying every first move; no memoisation."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    return min(
        brute_edit_distance(a[1:], b[1:]) + (a[0] != b[0]),
        brute_edit_distance(a[1:], b) + 1,
        brute_edit_distance(a, b[1:]) + 1,
    )


def oracle_bleu(hyps, refs, max_n=4):
    """Direct n-gram formula with list-based clipping."""
    p = []
    for n in range(1, max_n + 1):
        num = den = 0
        for h, r in zip(hyps, refs):
            hg = [tuple(h[i : i + n]) for i in range(len(h) - n + 1)]
            rg = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
            for g in set(hg):
                num += min(hg.count(g), rg.count(g))
            den += len(hg)
        if den == 0:
            continue
        if num == 0:
            return 0.0
        p.append(num / den)
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * bp * math.exp(sum(math.log(x) for x in p) / len(p))


def test_edit_distance_matches_exhaustive_search():
    alphabet = "abc"
    for la in range(0, 5):
        for lb in range(0, 5):
            for a in itertools.product(alphabet[:2], repeat=la):
                for b in itertools.product(alphabet, repeat=lb):
                    ops = edit_distance(a, b)
                    assert ops.distance == brute_edit_distance(a, b)
                    assert ops.distance == ops.substitutions + ops.insertions + ops.deletions
                    assert la - ops.deletions + ops.insertions == lb
    r = np.random.default_rng(0)
    for _ in range(300):
        a = list(r.integers(0, 3, size=r.integers(0, 7)))
        b = list(r.integers(0, 3, size=r.integers(0, 7)))
        assert edit_distance(a, b).distance == brute_edit_distance(a, b)


def test_edit_distance_examples():
    assert edit_distance([], list("abc")).insertions == 3
    assert edit_distance(list("abc"), []).deletions == 3
    assert edit_distance(list("kitten"), list("sitting")).distance == 3


def test_edit_distance_axioms():
    r = np.random.default_rng(1)
    for _ in range(100):
        a, b, c = (list(r.integers(0, 4, size=r.integers(0, 8))) for _ in range(3))
        d = lambda x, y: edit_distance(x, y).distance  # noqa: E731
        assert d(a, a) == 0
        assert d(a, b) == d(b, a)
        assert d(a, c) <= d(a, b) + d(b, c)


def test_bleu_matches_formula_oracle():
    r = np.random.default_rng(2)
    words = [f"w{i}" for i in range(6)]
    nonzero = 0
    for _ in range(100):
        n = int(r.integers(1, 6))
        refs = [[words[i] for i in r.integers(0, 6, size=r.integers(4, 12))] for _ in range(n)]
        hyps = []
        for ref in refs:
            h = list(ref)
            for _ in range(int(r.integers(0, 3))):
                h[int(r.integers(0, len(h)))] = words[int(r.integers(0, 6))]
            if r.random() < 0.3:
                h = h[: int(r.integers(1, len(h) + 1))]
            hyps.append(h)
        got, want = corpus_bleu(hyps, refs), oracle_bleu(hyps, refs)
        assert abs(got - want) <= 1e-9
        nonzero += want > 0
    assert nonzero > 50


def test_bleu_identity_and_zero():
    refs = [["a", "b", "c", "d", "e"], ["f", "g", "h", "i"]]
    assert corpus_bleu(refs, refs) == 100.0
    assert corpus_bleu([["x"] * 5, ["y"] * 4], refs) == 0.0
    assert corpus_bleu([[], []], refs) == 0.0
    assert corpus_bleu([["a", "b"], ["c"]], [["a", "b"], ["c"]]) == 100.0
    # only unigrams and bigrams exist: p1 = 3/4, p2 = 1/2, no brevity penalty
    hyps, refs = [["a", "b"], ["c", "d"]], [["a", "b"], ["c", "e"]]
    assert corpus_bleu(hyps, refs) == pytest.approx(100 * math.sqrt(3 / 4 * 1 / 2), abs=1e-12)


def test_bleu_brevity_penalty():
    ref = [list("abcdefgh")]
    assert corpus_bleu([list("abcdef")], ref) == pytest.approx(100 * math.exp(1 - 8 / 6), abs=1e-12)


def test_bleu_smoothing_and_lowercase():
    refs = [list("abcde")]
    assert corpus_bleu([list("abxdx")], refs) == 0.0
    assert corpus_bleu([list("abxdx")], refs, smooth=True) > 0.0
    assert corpus_bleu([["A", "B", "C", "D"]], [["a", "b", "c", "d"]], lowercase=True) == 100.0


def test_bleu_is_order_invariant_over_segments():
    r = np.random.default_rng(3)
    refs = [list(r.choice(list("abcde"), size=8)) for _ in range(6)]
    hyps = [ref[:-1] + ["a"] for ref in refs]
    perm = r.permutation(6)
    assert corpus_bleu(hyps, refs) == pytest.approx(corpus_bleu([hyps[i] for i in perm], [refs[i] for i in perm]), abs=1e-12)


def test_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [])
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [[]])


def test_error_rate():
    refs = [["a", "b", "c"], ["d", "e"]]
    assert error_rate(refs, refs).rate == 0.0
    assert error_rate([[], []], refs).rate == 100.0
    w = error_rate([["a", "x", "c"], ["d"]], refs)
    assert (w.errors, w.ref_tokens) == (2, 5) and w.rate == pytest.approx(40.0)
    w = error_rate([["a"], ["z"]], [["a"], []])
    assert w.excluded == 1 and w.rate == 0.0
    with pytest.raises(ValueError):
        error_rate([["a"]], [[]])
    with pytest.raises(ValueError):
        error_rate([["a"]], [["a"], ["b"]])


def test_shrink_stats():
    assert shrink_stats([0, 1, -2, 5], max_k=3) == [0.25, 0.5, 0.75, 0.75]
    table = shrink_stats([0, 3, 12])
    assert len(table) == 10 and table == sorted(table)
    with pytest.raises(ValueError):
        shrink_stats([])


def test_evaluate_records_and_report_json():
    refs = [{"id": "a", "text": "x y z w", "transcript": "p q", "phonemes": "1 2 3"},
            {"id": "b", "text": "u v w x", "transcript": "r", "phonemes": "4 5"}]
    hyps = [dict(r, shrink_len=3) for r in refs]
    rep = evaluate(hyps, refs)
    assert (rep.bleu, rep.wer, rep.per, rep.samples) == (100.0, 0.0, 0.0, 2)
    assert rep.shrink_error_table[0] == 0.5 and rep.shrink_error_table[1] == 1.0
    assert "BLEU     100.00" in rep.table()
    back = EvalReport(**json.loads(rep.to_json()))
    assert back == rep
    with pytest.raises(ValueError, match="id mismatch"):
        evaluate([dict(hyps[1]), dict(hyps[0])], refs)
    with pytest.raises(ValueError):
        evaluate([], refs)
