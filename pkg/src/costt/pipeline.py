"""Corpus-level decoding and scoring."""
from __future__ import annotations

from typing import Sequence

from .corpus import Quadruple, Vocabulary, stack_frames
from .metrics import EvalReport, corpus_bleu, error_rate, shrink_stats
from .model import CosttModel


def decode_corpus(
    model: CosttModel,
    vocab: Vocabulary,
    records: Sequence[Quadruple],
    right_context: int = 5,
    batch_size: int = 25,
) -> list[dict]:
    """Greedy consecutive decoding; one output record per input, in input order."""
    out = []
    for s in range(0, len(records), batch_size):
        chunk = records[s : s + batch_size]
        feats = [stack_frames(q.features, right_context) for q in chunk]
        for q, r in zip(chunk, model.greedy_decode(feats, vocab.asr, vocab.st, vocab.eos)):
            out.append({
                "id": q.id,
                "transcript": " ".join(vocab.decode(r.transcript)),
                "translation": " ".join(vocab.decode(r.translation)),
                "text": " ".join(vocab.decode(r.translation)),
                "phonemes": " ".join(vocab.decode(r.ctc_labels)),
                "shrink_len": r.shrink_length,
                "st_count": r.raw.count(vocab.st),
                "flags": {"missing_st": r.missing_st, "truncated": r.truncated, "extra_st": r.extra_st},
            })
    return out


def evaluate(hypotheses: Sequence[dict], references: Sequence[dict]) -> EvalReport:
    """Score hypothesis records against reference records with matching ids in the same order.

    References need ``text`` (translation) and may carry ``transcript`` and
    ``phonemes``; PER and the shrink table are produced when the phoneme
    fields exist on both sides.
    """
    if not hypotheses:
        raise ValueError("no hypotheses")
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    for h, r in zip(hypotheses, references):
        if h["id"] != r["id"]:
            raise ValueError(f"id mismatch: hypothesis {h['id']!r} vs reference {r['id']!r}")
    hyp_y = [h.get("text", h.get("translation", "")).split() for h in hypotheses]
    ref_y = [r["text"].split() for r in references]
    bleu = corpus_bleu(hyp_y, ref_y)
    excluded = {}
    if all("transcript" in r for r in references):
        w = error_rate([h.get("transcript", "").split() for h in hypotheses], [r["transcript"].split() for r in references])
        wer = w.rate
        excluded["wer"] = w.excluded
    else:
        wer = float("nan")
    per = table = None
    if all("phonemes" in r for r in references) and all("phonemes" in h for h in hypotheses):
        p = error_rate([h["phonemes"].split() for h in hypotheses], [r["phonemes"].split() for r in references])
        per = p.rate
        excluded["per"] = p.excluded
        if all("shrink_len" in h for h in hypotheses):
            table = shrink_stats([abs(h["shrink_len"] - len(r["phonemes"].split())) for h, r in zip(hypotheses, references)])
    return EvalReport(bleu, wer, per, len(hypotheses), table, excluded)


def reference_records(records: Sequence[Quadruple]) -> list[dict]:
    return [{"id": q.id, "text": " ".join(q.translation), "transcript": " ".join(q.transcript),
             "phonemes": " ".join(q.phonemes)} for q in records]
