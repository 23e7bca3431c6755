"""Connectionist temporal classification: loss, oracle, greedy decoding.

Conventions: frame posteriors are ``[T, |V'|]`` log-probabilities and the
blank symbol is the last column unless ``blank`` says otherwise. Targets are
sequences of non-blank ids.

Two routes compute the same loss. :func:`ctc_loss` runs the forward-backward
recursion in the compiled kernel and returns a tensor whose gradient is the
analytic state occupancy. :func:`ctc_loss_graph` spells out the forward
recursion with differentiable ``logaddexp`` primitives and lets the tape
differentiate it; it is slow and exists to cross-check the kernel.
"""
from __future__ import annotations

import functools
import itertools
import math
from typing import Sequence

import numpy as np

from . import kernels
from .tensor import Tensor, _make, concat, logaddexp, logsumexp

BRUTE_FORCE_LIMIT = 10**7


def _blank_id(n_labels: int, blank: int | None) -> int:
    return n_labels - 1 if blank is None else int(blank)


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge repeated labels, then drop blanks."""
    out: list[int] = []
    prev = None
    for p in path:
        p = int(p)
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return out


def min_frames(target: Sequence[int]) -> int:
    """Fewest frames that can emit ``target``: one per label plus a blank between equal neighbours."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def is_feasible(n_frames: int, target: Sequence[int]) -> bool:
    return n_frames >= 1 and n_frames >= min_frames(target)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _check_target(target: Sequence[int], blank: int, n_labels: int) -> np.ndarray:
    tgt = np.asarray(list(target), dtype=np.int64)
    if tgt.size and (tgt.min() < 0 or tgt.max() >= n_labels or np.any(tgt == blank)):
        raise ValueError(f"target ids must be non-blank labels in [0, {n_labels}), got {tgt.tolist()}")
    return tgt


def ctc_loss(frame_log_probs: Tensor, target: Sequence[int], blank: int | None = None) -> Tensor:
    """Negative log-likelihood of ``target`` summed over all CTC paths.

    Infeasible targets give ``+inf`` with a zero gradient, so callers can skip
    the sample instead of aborting.
    """
    lp = frame_log_probs if isinstance(frame_log_probs, Tensor) else Tensor(frame_log_probs)
    if lp.ndim != 2 or lp.shape[0] < 1:
        raise ValueError(f"frame_log_probs must be [T>=1, V], got {lp.shape}")
    b = _blank_id(lp.shape[1], blank)
    tgt = _check_target(target, b, lp.shape[1])
    loss, grad = kernels.ctc_forward_backward(lp.data, tgt, b)
    return _make(np.asarray(loss), (lp,), lambda g: (g * grad,), "ctc")


def ctc_loss_batch(
    log_probs: Tensor,
    lengths: Sequence[int],
    targets: Sequence[Sequence[int]],
    blank: int | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Per-utterance CTC losses for a padded ``[B, T, V']`` batch.

    Returns ``(losses[B], feasible[B])``; infeasible rows hold ``+inf`` and
    contribute no gradient.
    """
    B, _, V = log_probs.shape
    b = _blank_id(V, blank)
    losses = np.empty(B)
    grads = np.zeros(log_probs.shape)
    data = log_probs.data
    for i in range(B):
        n = int(lengths[i])
        tgt = _check_target(targets[i], b, V)
        losses[i], grads[i, :n] = kernels.ctc_forward_backward(data[i, :n], tgt, b)
    feasible = np.isfinite(losses)

    def bw(g):
        return (np.where(feasible, g, 0.0)[:, None, None] * grads,)

    return _make(losses, (log_probs,), bw, "ctc_batch"), feasible


def ctc_loss_graph(frame_log_probs: Tensor, target: Sequence[int], blank: int | None = None) -> Tensor:
    """The forward recursion built from tape primitives (reference route)."""
    lp = frame_log_probs if isinstance(frame_log_probs, Tensor) else Tensor(frame_log_probs)
    T, V = lp.shape
    b = _blank_id(V, blank)
    tgt = _check_target(target, b, V)
    if not is_feasible(T, tgt.tolist()):
        return Tensor(np.inf)
    S = 2 * len(tgt) + 1
    lab = np.full(S, b, dtype=np.int64)
    lab[1::2] = tgt
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (lab[2:] != b) & (lab[2:] != lab[:-2])
    neg = Tensor(np.full(1, -np.inf))

    emit0 = lp[0, lab]
    alpha = concat([emit0[:2], neg * np.ones(S - 2)], axis=0) if S > 2 else emit0[:S]
    for t in range(1, T):
        stay = alpha
        step = concat([neg, alpha[:-1]], axis=0)
        acc = logaddexp(stay, step)
        if skip.any():
            jump = concat([neg, neg, alpha[:-2]], axis=0)
            acc = logaddexp(acc, jump + np.where(skip, 0.0, -np.inf))
        alpha = acc + lp[t, lab]
    return -logsumexp(alpha[max(S - 2, 0):], axis=0)


@functools.lru_cache(maxsize=64)
def _all_paths(T: int, V: int) -> np.ndarray:
    return np.array(list(itertools.product(range(V), repeat=T)), dtype=np.int64).reshape(-1, T)


@functools.lru_cache(maxsize=64)
def _collapsed_paths(T: int, V: int, blank: int) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(collapse(p, blank)) for p in _all_paths(T, V))


def ctc_brute_force(frame_log_probs, target: Sequence[int], blank: int | None = None) -> float:
    """Enumerate every length-T path, keep those collapsing to ``target``, sum their probabilities.

    Returns the negative log of that sum (``inf`` when no path qualifies).
    """
    lp = _as_array(frame_log_probs)
    T, V = lp.shape
    if V**T > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force needs |V'|^T <= {BRUTE_FORCE_LIMIT}, got {V}^{T} = {V**T}")
    b = _blank_id(V, blank)
    goal = tuple(int(u) for u in target)
    paths = _all_paths(T, V)
    keep = [i for i, c in enumerate(_collapsed_paths(T, V, b)) if c == goal]
    if not keep:
        return math.inf
    scores = lp[np.arange(T), paths[keep]].sum(axis=1)
    m = scores.max()
    return float(-(m + math.log(np.exp(scores - m).sum())))


def ctc_greedy_decode(frame_log_probs, blank: int | None = None) -> tuple[list[int], list[int]]:
    """Per-frame argmax path and its collapsed label sequence."""
    lp = _as_array(frame_log_probs)
    b = _blank_id(lp.shape[1], blank)
    path = [int(i) for i in np.argmax(lp, axis=1)]
    return path, collapse(path, b)
