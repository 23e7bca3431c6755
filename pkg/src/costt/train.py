"""Losses, optimisation, and the two training procedures.

``train_from_scratch`` optimises the joint objective
``alpha * L_AS + (1 - alpha) * L_TT`` on speech quadruples.
``train_with_pretrain`` first trains the decoder alone on text pairs with a
zero memory (translation positions only), then the acoustic side alone on
CTC, then everything jointly.

Every random draw comes from a stream keyed by (seed, purpose, stage, step),
so a run resumed from a saved state replays the same batches, masks and
dropout as an uninterrupted one.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import checkpoint
from . import rng as rng_mod
from .corpus import SPECIALS, Quadruple, TextPair, Vocabulary, stack_frames
from .ctc import ctc_loss, ctc_loss_batch, min_frames
from .model import CosttModel
from .tensor import Tensor, backward, log_softmax, no_grad, where

log = logging.getLogger(__name__)

PAD = SPECIALS.index("<pad>")


class TrainingError(RuntimeError):
    pass


class NumericalError(TrainingError):
    def __init__(self, stage: str, step: int, value: float):
        super().__init__(f"non-finite loss {value} at {stage} step {step}")
        self.stage, self.step, self.value = stage, step, value


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lr_peak: float = 1e-3
    warmup_steps: int = 200
    batch_frames: int = 2000
    max_steps: int = 3000
    spec_freq_width: int = 2
    spec_freq_masks: int = 2
    spec_time_width: int = 4
    spec_time_masks: int = 2
    spec_augment: bool = True
    spec_augment_am_stage: bool = True
    label_smoothing: float = 0.1
    average_last: int = 10
    ckpt_every: int = 100
    val_every: int = 250
    patience: int = 10
    pretrain_steps: int = 2000
    pretrain_batch: int = 32
    am_steps: int = 500
    right_context: int = 5
    reduction: str = "mean"  # mean: per-token means; sum: per-utterance sums
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        for name in ("warmup_steps", "batch_frames", "max_steps", "average_last", "ckpt_every", "val_every",
                     "patience", "pretrain_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.pretrain_steps < 0 or self.am_steps < 0:
            raise ValueError("stage budgets must be >= 0")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        base = dict(batch_frames=20000, warmup_steps=4000, max_steps=400_000, spec_freq_width=30,
                    spec_time_width=40)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainReport:
    steps: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    skipped: int = 0
    wall_clock: float = 0.0

    def records(self) -> list[dict]:
        return [{"kind": "step", **s} for s in self.steps] + [{"kind": "val", **v} for v in self.validations]

    def write(self, path: str | os.PathLike) -> None:
        """Line-delimited JSON; wall-clock time is kept out so fixed-seed runs give identical files."""
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records():
                fh.write(json.dumps(r, sort_keys=True) + "\n")

    def losses(self, key: str = "loss", stage: str | None = None) -> list[float]:
        return [s[key] for s in self.steps if stage is None or s["stage"] == stage]


# -- data ---------------------------------------------------------------------
@dataclass
class Example:
    id: str
    features: np.ndarray  # raw [T_raw, d_feat]
    phonemes: list[int]
    sequence: list[int]  # <asr> z <st> y <eos>
    z_len: int


def consecutive_sequence(vocab: Vocabulary, z: Sequence[str], y: Sequence[str]) -> list[int]:
    return [vocab.asr, *vocab.encode(z, "source"), vocab.st, *vocab.encode(y, "target"), vocab.eos]


def prepare(records: Sequence[Quadruple | TextPair], vocab: Vocabulary) -> list[Example]:
    out = []
    for r in records:
        feats = r.features if isinstance(r, Quadruple) else np.zeros((0, 0))
        phon = vocab.encode(r.phonemes, "phoneme") if isinstance(r, Quadruple) else []
        out.append(Example(r.id, feats, phon, consecutive_sequence(vocab, r.transcript, r.translation),
                           len(r.transcript)))
    return out


def spec_augment(
    features: np.ndarray,
    freq_width: int,
    freq_masks: int,
    time_width: int,
    time_masks: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zero ``freq_masks`` bands of width U{0..freq_width} and ``time_masks`` spans of width U{0..time_width}."""
    x = np.array(features, dtype=np.float64, copy=True)
    T, D = x.shape
    for _ in range(freq_masks):
        f = min(int(rng.integers(0, freq_width + 1)), D)
        f0 = int(rng.integers(0, D - f + 1))
        x[:, f0 : f0 + f] = 0.0
    for _ in range(time_masks):
        t = min(int(rng.integers(0, time_width + 1)), T)
        t0 = int(rng.integers(0, T - t + 1))
        x[t0 : t0 + t, :] = 0.0
    return x


def make_batches(lengths: Sequence[int], frame_budget: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, bucket by length within windows, pack so that count * max_len <= frame_budget."""
    n = len(lengths)
    order = rng.permutation(n)
    window = 64
    batches: list[list[int]] = []
    for s in range(0, n, window):
        chunk = sorted(order[s : s + window].tolist(), key=lambda i: (lengths[i], i))
        cur: list[int] = []
        longest = 0
        for i in chunk:
            m = max(longest, lengths[i])
            if cur and (len(cur) + 1) * m > frame_budget:
                batches.append(cur)
                cur, m = [], lengths[i]
            cur.append(i)
            longest = m
        if cur:
            batches.append(cur)
    return [batches[k] for k in rng.permutation(len(batches))]


def batch_stream(lengths: Sequence[int], frame_budget: int, seed: int, stage: str) -> Iterator[list[int]]:
    epoch = 0
    while True:
        yield from make_batches(lengths, frame_budget, rng_mod.stream(seed, "batching", stage, epoch))
        epoch += 1


def count_batches(n: int, size: int, seed: int, stage: str) -> Iterator[list[int]]:
    epoch = 0
    while True:
        order = rng_mod.stream(seed, "batching", stage, epoch).permutation(n).tolist()
        for s in range(0, n, size):
            yield order[s : s + size]
        epoch += 1


# -- losses -------------------------------------------------------------------
def sequence_ce(
    logits: Tensor,
    targets: np.ndarray,
    weights: np.ndarray,
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """Weighted (label-smoothed) cross entropy over ``[B, N, V]`` logits."""
    lp = log_softmax(logits)
    B, N, _ = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    picked = lp[np.arange(B)[:, None], np.arange(N)[None, :], targets]
    per = -picked
    if label_smoothing > 0:
        per = per * (1.0 - label_smoothing) - lp.mean(axis=-1) * label_smoothing
    w = np.asarray(weights, dtype=np.float64)
    denom = w.sum() if reduction == "mean" else B
    return (per * w).sum() * (1.0 / max(denom, 1e-300))


def _shifted(sequence: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    seq = np.asarray(sequence, dtype=np.int64)
    return seq[:-1], seq[1:]


def tt_ce_loss(logits: Tensor, gold: Sequence[int], label_smoothing: float = 0.0, reduction: str = "mean") -> Tensor:
    """Cross entropy of teacher-forced ``[N, V]`` logits against ``gold[1:]`` (``N = len(gold) - 1``)."""
    _, targets = _shifted(gold)
    if logits.ndim != 2 or logits.shape[0] != len(targets):
        raise ValueError(f"logits {logits.shape} do not align with {len(targets)} gold targets")
    lg = logits.reshape(1, *logits.shape)
    return sequence_ce(lg, targets[None], np.ones((1, len(targets))), label_smoothing, reduction)


def pretrain_weights(z_len: int, n_targets: int) -> np.ndarray:
    """1 for targets that are translation tokens or the final <eos>, 0 for transcript and <st>."""
    w = np.zeros(n_targets)
    w[z_len + 1 :] = 1.0
    return w


def masked_pretrain_loss(
    logits: Tensor,
    z_tokens: Sequence[int],
    y_tokens: Sequence[int],
    asr: int = 0,
    st: int = 1,
    eos: int = 2,
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """Cross entropy on the ``T_y + 1`` positions predicting y and <eos>; transcript positions are masked."""
    gold = [asr, *z_tokens, st, *y_tokens, eos]
    _, targets = _shifted(gold)
    if logits.shape[0] != len(targets):
        raise ValueError(f"logits {logits.shape} do not align with {len(targets)} targets")
    w = pretrain_weights(len(z_tokens), len(targets))
    return sequence_ce(logits.reshape(1, *logits.shape), targets[None], w[None], label_smoothing, reduction)


def joint_loss(
    ctc_log_probs: Tensor,
    u: Sequence[int],
    logits: Tensor,
    gold: Sequence[int],
    alpha: float,
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """``alpha * L_AS + (1 - alpha) * L_TT`` for one utterance; an infeasible CTC target drops the L_AS term."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    l_tt = tt_ce_loss(logits, gold, label_smoothing, reduction)
    l_as = ctc_loss(ctc_log_probs, u)
    if not math.isfinite(l_as.item()):
        return l_tt * (1.0 - alpha)
    if reduction == "mean":
        l_as = l_as * (1.0 / max(len(u), 1))
    return l_as * alpha + l_tt * (1.0 - alpha)


@dataclass
class BatchLoss:
    total: Tensor
    l_as: float
    l_tt: float
    skipped: int


def batch_loss(
    model: CosttModel,
    batch: Sequence[Example],
    cfg: TrainConfig,
    *,
    alpha: float,
    train: bool,
    rng_seed: tuple | None = None,
    with_tt: bool = True,
    augment: bool = True,
) -> BatchLoss:
    """Joint loss on a speech batch; ``alpha=1, with_tt=False`` gives the CTC-only objective."""
    drop_rng = rng_mod.stream(*rng_seed, "dropout") if train and rng_seed else None
    aug_rng = rng_mod.stream(*rng_seed, "augment") if train and rng_seed and augment and cfg.spec_augment else None
    feats = []
    for ex in batch:
        x = ex.features
        if aug_rng is not None:
            x = spec_augment(x, cfg.spec_freq_width, cfg.spec_freq_masks, cfg.spec_time_width, cfg.spec_time_masks,
                             aug_rng)
        feats.append(stack_frames(x, cfg.right_context))
    enc = model.encode(feats, drop_rng)
    smoothing = cfg.label_smoothing if train else 0.0
    total = None
    l_as = l_tt = 0.0
    skipped = 0
    if alpha > 0:
        losses, feasible = ctc_loss_batch(enc.ctc_log_probs, enc.frame_lengths, [ex.phonemes for ex in batch],
                                          blank=model.cfg.vocab_size)
        skipped = int((~feasible).sum())
        if feasible.any():
            if cfg.reduction == "mean":
                w = np.where(feasible, 1.0, 0.0) / sum(len(ex.phonemes) for ex, f in zip(batch, feasible) if f)
            else:
                w = np.where(feasible, 1.0, 0.0) / feasible.sum()
            as_term = _finite_weighted_sum(losses, w, feasible)
            l_as = as_term.item()
            total = as_term * alpha
    if with_tt and alpha < 1:
        seqs = [ex.sequence for ex in batch]
        N = max(len(s) for s in seqs) - 1
        inp = np.full((len(batch), N), PAD, dtype=np.int64)
        tgt = np.full((len(batch), N), PAD, dtype=np.int64)
        wts = np.zeros((len(batch), N))
        for i, s in enumerate(seqs):
            inp[i, : len(s) - 1] = s[:-1]
            tgt[i, : len(s) - 1] = s[1:]
            wts[i, : len(s) - 1] = 1.0
        logits = model.decode_logits(enc.memory, enc.memory_lengths, inp, drop_rng)
        tt_term = sequence_ce(logits, tgt, wts, smoothing, cfg.reduction)
        l_tt = tt_term.item()
        total = tt_term * (1.0 - alpha) if total is None else total + tt_term * (1.0 - alpha)
    if total is None:
        total = Tensor(0.0)
    return BatchLoss(total, l_as, l_tt, skipped)


def _finite_weighted_sum(losses: Tensor, w: np.ndarray, feasible: np.ndarray) -> Tensor:
    # infeasible entries are +inf; route them through a zero-gradient constant
    if feasible.all():
        return (losses * w).sum()
    return (where(feasible, losses, Tensor(0.0)) * w).sum()


def pretrain_batch_loss(
    model: CosttModel,
    batch: Sequence[Example],
    cfg: TrainConfig,
    *,
    train: bool,
    rng_seed: tuple | None = None,
) -> Tensor:
    drop_rng = rng_mod.stream(*rng_seed, "dropout") if train and rng_seed else None
    seqs = [ex.sequence for ex in batch]
    N = max(len(s) for s in seqs) - 1
    inp = np.full((len(batch), N), PAD, dtype=np.int64)
    tgt = np.full((len(batch), N), PAD, dtype=np.int64)
    wts = np.zeros((len(batch), N))
    for i, (ex, s) in enumerate(zip(batch, seqs)):
        inp[i, : len(s) - 1] = s[:-1]
        tgt[i, : len(s) - 1] = s[1:]
        wts[i, : len(s) - 1] = pretrain_weights(ex.z_len, len(s) - 1)
    logits = model.tt_pretrain_forward(inp, drop_rng)
    return sequence_ce(logits, tgt, wts, cfg.label_smoothing if train else 0.0, cfg.reduction)


# -- optimiser ------------------------------------------------------------------
class Adam:
    """Adam with bias correction; ``step`` touches only the named parameters."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, lr: float, names: Sequence[str] | None = None, clip_norm: float | None = None) -> float:
        names = list(self.params) if names is None else list(names)
        grads = {k: self.params[k].grad for k in names if self.params[k].grad is not None}
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = 1.0
        if clip_norm and norm > clip_norm:
            scale = clip_norm / norm
        for k, g in grads.items():
            g = g * scale
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**t)
            vhat = self.v[k] / (1 - self.b2**t)
            self.params[k].data = self.params[k].data - lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m/{k}"] = self.m[k]
            out[f"adam.v/{k}"] = self.v[k]
            out[f"adam.t/{k}"] = np.array([self.t[k]], dtype=np.float64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k in self.params:
            self.m[k] = arrays[f"adam.m/{k}"].copy()
            self.v[k] = arrays[f"adam.v/{k}"].copy()
            self.t[k] = int(arrays[f"adam.t/{k}"][0])


def inverse_sqrt_lr(step: int, peak: float, warmup: int) -> float:
    """Linear warm-up to ``peak`` over ``warmup`` steps, then decay as ``1/sqrt(step)``; ``step`` starts at 1."""
    step = max(step, 1)
    return peak * min(step / warmup, math.sqrt(warmup / step))


def average_checkpoints(checkpoints: Sequence[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    names = set(checkpoints[0])
    for c in checkpoints[1:]:
        if set(c) != names:
            raise ValueError("checkpoints hold different parameter names")
        for k in names:
            if c[k].shape != checkpoints[0][k].shape:
                raise ValueError(f"shape mismatch for {k}: {c[k].shape} vs {checkpoints[0][k].shape}")
    if len(checkpoints) == 1:
        return {k: v.copy() for k, v in checkpoints[0].items()}
    return {k: np.mean(np.stack([c[k] for c in checkpoints]), axis=0) for k in checkpoints[0]}


# -- the training loop ----------------------------------------------------------
STAGES_SCRATCH = ("scratch",)
STAGES_PRETRAIN = ("condec", "am", "finetune")


class Trainer:
    """Runs one or more stages, writing stage-tagged checkpoints and a resumable state."""

    def __init__(
        self,
        model: CosttModel,
        vocab: Vocabulary,
        cfg: TrainConfig,
        out_dir: str | os.PathLike | None = None,
        on_step: Callable[[dict], None] | None = None,
    ):
        cfg.validate()
        self.model, self.vocab, self.cfg = model, vocab, cfg
        self.out_dir = Path(out_dir) if out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.on_step = on_step
        self.opt = Adam(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.report = TrainReport()
        self.snapshots: list[tuple[str, dict[str, np.ndarray]]] = []
        self._resume: dict | None = None

    # state -----------------------------------------------------------------
    def save_state(self, stage: str, step: int, extra: dict) -> Path | None:
        if not self.out_dir:
            return None
        path = self.out_dir / "train_state.ckpt"
        arrays = {f"param/{k}": v for k, v in self.model.state_dict().items()} | self.opt.state_arrays()
        checkpoint.save(path, arrays)
        meta = {"stage": stage, "step": step, "report": asdict(self.report) | {"wall_clock": 0.0},
                "snapshots": [n for n, _ in self.snapshots], **extra}
        tmp = self.out_dir / "train_state.json.tmp"
        tmp.write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.out_dir / "train_state.json")
        return path

    def load_state(self, path: str | os.PathLike) -> None:
        path = Path(path)
        arrays = checkpoint.load(path)
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        self.model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
        self.opt = Adam(self.model.params, self.cfg.beta1, self.cfg.beta2, self.cfg.adam_eps)
        self.opt.load_state_arrays(arrays)
        rep = meta["report"]
        self.report = TrainReport(rep["steps"], rep["validations"], rep["skipped"], 0.0)
        self.snapshots = [(n, checkpoint.load(path.parent / n)) for n in meta["snapshots"]]
        self._resume = meta

    # stages ------------------------------------------------------------------
    def run(
        self,
        stages: Sequence[str],
        train: Sequence[Example],
        dev: Sequence[Example] = (),
        text: Sequence[Example] = (),
    ) -> TrainReport:
        start = time.perf_counter()
        resume = self._resume
        for stage in stages:
            if resume and stages.index(stage) < stages.index(resume["stage"]):
                continue
            first = resume["step"] if resume and resume["stage"] == stage else 0
            best = resume.get("best", math.inf) if resume and resume["stage"] == stage else math.inf
            bad = resume.get("bad", 0) if resume and resume["stage"] == stage else 0
            resume = None
            self._run_stage(stage, train, dev, text, first, best, bad)
        if self.snapshots and self.cfg.average_last > 1:
            avg = average_checkpoints([s for _, s in self.snapshots[-self.cfg.average_last :]])
            self.model.load_state_dict(avg)
        if self.out_dir:
            self.model.save(self.out_dir / "final.ckpt")
            self.report.write(self.out_dir / "report.jsonl")
        self.report.wall_clock += time.perf_counter() - start
        return self.report

    def _stage_plan(self, stage: str):
        c = self.cfg
        m = self.model
        if stage == "condec":
            return c.pretrain_steps, m.tt_names
        if stage == "am":
            return c.am_steps, m.as_names
        return c.max_steps, list(m.params)

    def _run_stage(self, stage, train, dev, text, first, best, bad):
        c = self.cfg
        steps, names = self._stage_plan(stage)
        if stage == "condec":
            if not text:
                raise TrainingError("decoder pretraining needs a non-empty text corpus")
            stream = count_batches(len(text), c.pretrain_batch, c.seed, stage)
            pool = text
        else:
            if not train:
                raise TrainingError("training corpus is empty")
            lengths = [len(ex.features) for ex in train]
            stream = batch_stream(lengths, c.batch_frames, c.seed, stage)
            pool = train
        for _ in range(first):
            next(stream)
        self.snapshots = [s for s in self.snapshots if s[0].startswith(stage + "-")]
        for step in range(first + 1, steps + 1):
            batch = [pool[i] for i in next(stream)]
            rec = self._train_step(stage, step, batch, names)
            self.report.steps.append(rec)
            if self.on_step:
                self.on_step(rec)
            stop = False
            if dev and (step % c.val_every == 0 or step == steps):
                val = self.validate(stage, dev)
                self.report.validations.append({"stage": stage, "step": step, **val})
                if val["loss"] < best - 1e-12:
                    best, bad = val["loss"], 0
                else:
                    bad += 1
                    stop = bad >= c.patience
            if step % c.ckpt_every == 0 or step == steps or stop:
                self._snapshot(stage, step)
                self.save_state(stage, step, {"best": best, "bad": bad})
            if stop:
                log.info("early stop at %s step %d", stage, step)
                break

    def _snapshot(self, stage: str, step: int) -> None:
        name = f"{stage}-{step:06d}.ckpt"
        state = self.model.state_dict()
        if self.snapshots and self.snapshots[-1][0] == name:
            return
        self.snapshots.append((name, state))
        self.snapshots = self.snapshots[-self.cfg.average_last :]
        if self.out_dir:
            checkpoint.save(self.out_dir / name, state)

    def _train_step(self, stage: str, step: int, batch: list[Example], names: list[str]) -> dict:
        c = self.cfg
        seed = (c.seed, stage, step)
        for p in self.model.params.values():
            p.grad = None
        if stage == "condec":
            total = pretrain_batch_loss(self.model, batch, c, train=True, rng_seed=seed)
            l_as, l_tt, skipped = 0.0, total.item(), 0
        elif stage == "am":
            bl = batch_loss(self.model, batch, c, alpha=1.0, train=True, rng_seed=seed, with_tt=False,
                            augment=c.spec_augment_am_stage)
            total, l_as, l_tt, skipped = bl.total, bl.l_as, 0.0, bl.skipped
        else:
            bl = batch_loss(self.model, batch, c, alpha=c.alpha, train=True, rng_seed=seed)
            total, l_as, l_tt, skipped = bl.total, bl.l_as, bl.l_tt, bl.skipped
        value = total.item()
        if not math.isfinite(value):
            raise NumericalError(stage, step, value)
        self.report.skipped += skipped
        lr = inverse_sqrt_lr(step, c.lr_peak, c.warmup_steps)
        if total.requires_grad:
            backward(total)
            self.opt.step(lr, names, c.clip_norm)
        return {"stage": stage, "step": step, "l_as": l_as, "l_tt": l_tt, "loss": value, "lr": lr,
                "skipped": skipped}

    def validate(self, stage: str, dev: Sequence[Example]) -> dict:
        return evaluate_loss(self.model, dev, self.cfg, stage)


def evaluate_loss(model: CosttModel, data: Sequence[Example], cfg: TrainConfig, stage: str = "scratch") -> dict:
    """Deterministic (no dropout/augmentation, no smoothing) loss over ``data``, batch-size weighted."""
    tot = {"l_as": 0.0, "l_tt": 0.0, "loss": 0.0}
    n = 0
    with no_grad():
        for s in range(0, len(data), 25):
            batch = list(data[s : s + 25])
            if stage == "condec":
                v = pretrain_batch_loss(model, batch, cfg, train=False).item()
                part = {"l_as": 0.0, "l_tt": v, "loss": v}
            elif stage == "am":
                bl = batch_loss(model, batch, cfg, alpha=1.0, train=False, with_tt=False)
                part = {"l_as": bl.l_as, "l_tt": 0.0, "loss": bl.total.item()}
            else:
                bl = batch_loss(model, batch, cfg, alpha=cfg.alpha, train=False)
                part = {"l_as": bl.l_as, "l_tt": bl.l_tt, "loss": bl.total.item()}
            for k in tot:
                tot[k] += part[k] * len(batch)
            n += len(batch)
    return {k: v / max(n, 1) for k, v in tot.items()}


def check_feasibility(model: CosttModel, data: Sequence[Example]) -> int:
    """Count utterances whose phoneme target cannot fit the downsampled frame count; abort above 50%."""
    rate = model.cfg.downsample_rate
    bad = sum(1 for ex in data if math.ceil(len(ex.features) / rate) < min_frames(ex.phonemes))
    if data and bad > len(data) / 2:
        raise TrainingError(f"{bad}/{len(data)} utterances have infeasible CTC targets")
    return bad


def train_from_scratch(
    model: CosttModel,
    vocab: Vocabulary,
    train: Sequence[Quadruple],
    cfg: TrainConfig,
    dev: Sequence[Quadruple] = (),
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[CosttModel, TrainReport]:
    tr = prepare(train, vocab)
    check_feasibility(model, tr)
    trainer = Trainer(model, vocab, cfg, out_dir, on_step)
    if resume:
        trainer.load_state(resume)
    trainer.run(STAGES_SCRATCH, tr, prepare(dev, vocab))
    return trainer.model, trainer.report


def train_with_pretrain(
    model: CosttModel,
    vocab: Vocabulary,
    train: Sequence[Quadruple],
    text: Sequence[TextPair],
    cfg: TrainConfig,
    dev: Sequence[Quadruple] = (),
    out_dir: str | os.PathLike | None = None,
    resume: str | os.PathLike | None = None,
    on_step: Callable[[dict], None] | None = None,
    stages: Sequence[str] = STAGES_PRETRAIN,
) -> tuple[CosttModel, TrainReport]:
    if "condec" in stages and not text:
        raise TrainingError("text corpus A is empty")
    tr = prepare(train, vocab)
    check_feasibility(model, tr)
    trainer = Trainer(model, vocab, cfg, out_dir, on_step)
    if resume:
        trainer.load_state(resume)
    trainer.run(tuple(stages), tr, prepare(dev, vocab), prepare(text, vocab))
    return trainer.model, trainer.report
