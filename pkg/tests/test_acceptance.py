"""Acceptance gate: nine criteria at their stated tolerances.

The training criteria (4-7) share models through a cached runner so each
configuration is trained once per session. A one-line verdict per criterion
is printed in the terminal summary.
"""
import dataclasses
import functools
import itertools
import math
import time

import numpy as np
import pytest

from costt import cli, kernels
from costt.corpus import SynthConfig, build_vocab, stack_frames, synth_generate
from costt.ctc import collapse, ctc_brute_force, ctc_loss
from costt.metrics import corpus_bleu, edit_distance, error_rate
from costt.model import CosttModel, ModelConfig
from costt.pipeline import decode_corpus, evaluate, reference_records
from costt.shrink import shrink
from costt.tensor import Tensor, finite_diff_check, log_softmax, no_grad
from costt.train import (
    TrainConfig,
    average_checkpoints,
    batch_loss,
    masked_pretrain_loss,
    prepare,
    train_from_scratch,
    train_with_pretrain,
    tt_ce_loss,
)

from conftest import random_log_probs
from test_metrics import brute_edit_distance, oracle_bleu

SEEDS = (0, 1, 2)
# Desk recipe used by the training criteria; everything else keeps its default.
MODEL_OVERRIDES = dict(dropout=0.3)
TRAIN_OVERRIDES = dict(lr_peak=3e-3, warmup_steps=800, batch_frames=6000)
TRAIN_STEPS = 5000

slow = pytest.mark.slow


def criterion(n, title):
    return pytest.mark.criterion(n, title)


# -- shared training runs ------------------------------------------------------------
@functools.cache
def benchmark(seed):
    data = synth_generate(SynthConfig(seed=seed))
    return data, build_vocab([data.train, data.dev, data.test, data.text])


@dataclasses.dataclass
class Run:
    model: CosttModel
    report: object
    seconds: float
    scores: object
    hyps: list


@functools.cache
def run(seed, variant, steps):
    """Train one configuration: full | no_shrink | no_as from scratch, or pretrained."""
    data, vocab = benchmark(seed)
    mcfg = ModelConfig(vocab_size=vocab.size, d_input=data.train[0].features.shape[1] * 6, **MODEL_OVERRIDES)
    tcfg = TrainConfig(max_steps=steps, seed=seed, **TRAIN_OVERRIDES)
    if variant in ("no_shrink", "no_as"):
        mcfg = dataclasses.replace(mcfg, use_shrink=False)
    if variant == "no_as":
        tcfg = dataclasses.replace(tcfg, alpha=0.0)
    model = CosttModel(mcfg, seed=seed)
    start = time.perf_counter()
    if variant == "pretrained":
        model, report = train_with_pretrain(model, vocab, data.train, data.text, tcfg, data.dev)
    else:
        model, report = train_from_scratch(model, vocab, data.train, tcfg, data.dev)
    seconds = time.perf_counter() - start
    hyps = decode_corpus(model, vocab, data.test)
    return Run(model, report, seconds, evaluate(hyps, reference_records(data.test)), hyps)


def dev_loss_at(report, stage, step):
    (v,) = [v for v in report.validations if v["stage"] == stage and v["step"] == step]
    return v["loss"]


# -- 1 ----------------------------------------------------------------------------------
@criterion(1, "CTC matches brute-force path enumeration")
def test_ctc_oracle_sweep(record_property):
    start = time.perf_counter()
    r = np.random.default_rng(2024)
    worst = 0.0
    cases = 0
    for T, U, V in itertools.product(range(1, 7), range(0, 4), range(2, 5)):
        for _ in range(20):
            lp = random_log_probs(r, T, V)
            target = [int(t) for t in r.integers(0, V - 1, size=U)]
            got = ctc_loss(Tensor(lp), target, V - 1).item()
            want = ctc_brute_force(lp, target, V - 1)
            if math.isinf(want):
                assert math.isinf(got)
            else:
                worst = max(worst, abs(got - want))
            cases += 1
    elapsed = time.perf_counter() - start
    record_property("detail", f"{cases} cases, max |diff| {worst:.2e}, {elapsed:.1f}s, backend {kernels.backend()}")
    assert worst <= 1e-9
    assert elapsed < 60


# -- 2 ----------------------------------------------------------------------------------
@criterion(2, "finite-difference gradient suite")
def test_gradient_suite(record_property):
    start = time.perf_counter()
    r = np.random.default_rng(7)
    errs = {}

    logits = Tensor(r.normal(size=(7, 5)), requires_grad=True)
    errs["ctc_loss"] = finite_diff_check(lambda: ctc_loss(log_softmax(logits), [0, 2, 2], 4), [logits])

    h = Tensor(r.normal(size=(9, 4)), requires_grad=True)
    w = r.normal(size=(9, 4))
    post = random_log_probs(r, 9, 4)

    def shrunk_sum():
        out = shrink(h, post, 3)
        return (out.h_prime * Tensor(w[: out.length])).sum()

    errs["shrink"] = finite_diff_check(shrunk_sum, [h])

    ce_logits = Tensor(r.normal(size=(6, 9)), requires_grad=True)
    gold = [0, 4, 5, 1, 7, 8, 2]
    errs["tt_ce_loss"] = finite_diff_check(lambda: tt_ce_loss(ce_logits, gold, label_smoothing=0.1), [ce_logits])
    errs["masked_pretrain_loss"] = finite_diff_check(
        lambda: masked_pretrain_loss(ce_logits, [4, 5], [7, 8], label_smoothing=0.1), [ce_logits])

    data = synth_generate(SynthConfig(n_phonemes=6, n_words=8, phonemes_per_word=(1, 2), words_per_utterance=(1, 2),
                                      frames_per_phoneme=(4, 5), d_feat=4, n_train=2, n_dev=0, n_test=0, n_text=0))
    vocab = build_vocab([data.train])
    model = CosttModel(ModelConfig(d_input=4 * 6, vocab_size=vocab.size, d_model=16, heads=2, pre_shrink_layers=1,
                                   post_shrink_layers=1, decoder_layers=1, ffn_dim=32, dropout=0.0), seed=0)
    batch = prepare(data.train, vocab)
    cfg = TrainConfig(label_smoothing=0.1)
    errs["joint_loss"] = finite_diff_check(lambda: batch_loss(model, batch, cfg, alpha=0.5, train=False).total,
                                           model.params, sample=400, rng=np.random.default_rng(0))
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {elapsed:.0f}s")
    assert all(v < 1e-3 for v in errs.values()), errs
    assert elapsed < 120


# -- 3 ----------------------------------------------------------------------------------
@criterion(3, "shrinking agrees with greedy CTC collapse")
def test_shrink_consistency(record_property):
    r = np.random.default_rng(3)
    degenerate = 0
    worst = 0.0
    for _ in range(1000):
        T, V = int(r.integers(1, 30)), int(r.integers(2, 8))
        lp = random_log_probs(r, T, V)
        h = r.normal(size=(T, 6))
        out = shrink(Tensor(h), lp, V - 1)
        if out.degenerate:
            degenerate += 1
            continue
        assert out.length == len(collapse(np.argmax(lp, axis=1), V - 1))
        for row, (s, e) in zip(out.h_prime.data, out.run_spans):
            worst = max(worst, float(np.max(np.abs(row - h[s:e].mean(axis=0)))))
    record_property("detail", f"{1000 - degenerate} non-degenerate, max span error {worst:.1e}")
    assert worst <= 1e-12


# -- 4 ----------------------------------------------------------------------------------
@slow
@criterion(4, "toy end-to-end training from scratch")
def test_end_to_end_training(record_property):
    res = run(0, "full", TRAIN_STEPS)
    s = res.scores
    st_ok = sum(h["st_count"] == 1 for h in res.hyps)
    record_property("detail", f"BLEU {s.bleu:.2f}, WER {s.wer:.2f}, PER {s.per:.2f}, one <st> in {st_ok}/{len(res.hyps)}, "
                              f"{TRAIN_STEPS} steps in {res.seconds:.0f}s")
    assert res.seconds <= 15 * 60
    assert st_ok == len(res.hyps)
    assert s.per <= 5
    assert s.wer <= 10
    assert s.bleu >= 85


# -- 5 ----------------------------------------------------------------------------------
@slow
@criterion(5, "decoder pretraining helps")
def test_pretraining_benefit(record_property):
    wins = 0
    bleu_ok = 0
    lines = []
    for seed in SEEDS:
        scratch = run(seed, "full", TRAIN_STEPS)
        pre = run(seed, "pretrained", TRAIN_STEPS)
        a, b = dev_loss_at(pre.report, "finetune", 1000), dev_loss_at(scratch.report, "scratch", 1000)
        wins += a < b
        bleu_ok += pre.scores.bleu >= scratch.scores.bleu - 0.5
        lines.append(f"seed {seed}: dev@1000 {a:.3f} vs {b:.3f}, BLEU {pre.scores.bleu:.2f} vs {scratch.scores.bleu:.2f}")
    record_property("detail", " | ".join(lines))
    assert wins >= 2
    assert bleu_ok == len(SEEDS)


# -- 6 ----------------------------------------------------------------------------------
@slow
@criterion(6, "ablations: removing shrinking or the CTC loss lowers BLEU")
def test_ablation_direction(record_property):
    bleu = {v: [run(s, v, TRAIN_STEPS).scores.bleu for s in SEEDS] for v in ("full", "no_shrink", "no_as")}
    record_property("detail", ", ".join(f"{v} " + "/".join(f"{b:.2f}" for b in bs) for v, bs in bleu.items()))
    majority = len(SEEDS) // 2 + 1
    assert sum(f > n for f, n in zip(bleu["full"], bleu["no_shrink"])) >= majority
    assert sum(f > n for f, n in zip(bleu["full"], bleu["no_as"])) >= majority
    assert sum(a < n for a, n in zip(bleu["no_as"], bleu["no_shrink"])) >= majority


# -- 7 ----------------------------------------------------------------------------------
@slow
@criterion(7, "shrunk length within 3 of the phoneme count")
def test_shrink_length_statistics(record_property):
    model = run(0, "full", TRAIN_STEPS).model
    data, _ = benchmark(0)
    errors = []
    with no_grad():
        for s in range(0, len(data.train), 50):
            chunk = data.train[s : s + 50]
            out = model.encode([stack_frames(q.features, 5) for q in chunk])
            errors += [abs(int(L) - len(q.phonemes)) for L, q in zip(out.memory_lengths, chunk)]
    within = sum(e <= 3 for e in errors) / len(errors)
    record_property("detail", f"P(|L - T_u| <= 3) = {within:.3f} over {len(errors)} utterances, "
                              f"exact {sum(e == 0 for e in errors) / len(errors):.3f}")
    assert within >= 0.90


# -- 8 ----------------------------------------------------------------------------------
@criterion(8, "metric oracles")
def test_metric_oracles(record_property):
    r = np.random.default_rng(8)
    words = [f"w{i}" for i in range(5)]
    worst = 0.0
    for _ in range(100):
        refs = [[words[i] for i in r.integers(0, 5, size=r.integers(4, 10))] for _ in range(int(r.integers(1, 5)))]
        hyps = [[t if r.random() > 0.2 else words[int(r.integers(0, 5))] for t in ref] for ref in refs]
        worst = max(worst, abs(corpus_bleu(hyps, refs) - oracle_bleu(hyps, refs)))
        assert corpus_bleu(refs, refs) == 100.0
        assert error_rate(refs, refs).rate == 0.0
    checked = 0
    for la, lb in itertools.product(range(7), repeat=2):
        for _ in range(3):
            a = list(r.integers(0, 3, size=la))
            b = list(r.integers(0, 3, size=lb))
            assert edit_distance(a, b).distance == brute_edit_distance(a, b)
            checked += 1
    record_property("detail", f"max BLEU diff {worst:.1e}, {checked} edit-distance cases")
    assert worst <= 1e-9


# -- 9 ----------------------------------------------------------------------------------
@slow
@criterion(9, "determinism and serialization")
def test_determinism(tmp_path, record_property):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("seed = 11\ntrain.max_steps = 100\ntrain.ckpt_every = 50\n")
    outputs = []
    for attempt in ("a", "b"):
        root = tmp_path / attempt
        assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
        assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
        assert cli.main(["decode", "--checkpoint", str(root / "run" / "final.ckpt"),
                         "--input", str(root / "data" / "test.manifest"), "--out", str(root / "hyp.jsonl")]) == 0
        outputs.append({p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()})
    assert outputs[0].keys() == outputs[1].keys()
    differing = [str(k) for k in outputs[0] if outputs[0][k] != outputs[1][k]]
    assert not differing, differing

    root = tmp_path / "a"
    from costt.config import RunConfig
    from costt.corpus import Vocabulary, load_manifest

    vocab = Vocabulary.load(root / "run" / "vocab.txt")
    mcfg = cli._model_config(RunConfig.load(root / "run" / "run.cfg"), vocab)
    model = CosttModel.load(root / "run" / "final.ckpt", mcfg)
    model.save(tmp_path / "copy.ckpt")
    copy = CosttModel.load(tmp_path / "copy.ckpt", mcfg)
    test = load_manifest(root / "data" / "test.manifest")
    assert decode_corpus(copy, vocab, test) == decode_corpus(model, vocab, test)
    state = model.state_dict()
    same = average_checkpoints([state])
    assert all(np.array_equal(same[k], state[k]) for k in state)
    record_property("detail", f"{len(outputs[0])} files byte-identical across two runs")
