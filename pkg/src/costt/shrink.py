"""Acoustic-unit shrinking.

Frames whose CTC argmax is blank are dropped and each maximal run of frames
sharing a non-blank argmax is replaced by the mean of its encoder states. The
frame selection is a hard decision (no gradient); the averaging is an ordinary
differentiable matmul, so every member frame of a run receives ``1/len`` of
the run's output gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor, matmul

DEGENERATE = -1  # run label used when every frame was blank


@dataclass
class ShrinkOutput:
    h_prime: Tensor
    run_labels: list[int]
    run_spans: list[tuple[int, int]]  # [start, end) frame indices
    degenerate: bool = False

    @property
    def length(self) -> int:
        return len(self.run_labels)


@dataclass
class BatchShrink:
    h_prime: Tensor  # [B, L_max, d], zero rows past each length
    lengths: np.ndarray
    runs: list[list[int]] = field(default_factory=list)
    spans: list[list[tuple[int, int]]] = field(default_factory=list)
    degenerate: np.ndarray | None = None


def find_runs(frame_log_probs: np.ndarray, blank: int | None = None) -> tuple[list[int], list[tuple[int, int]], bool]:
    """Run labels and spans from per-frame argmax; falls back to one frame if all are blank."""
    lp = np.asarray(frame_log_probs)
    b = lp.shape[1] - 1 if blank is None else blank
    best = np.argmax(lp, axis=1)
    labels: list[int] = []
    spans: list[tuple[int, int]] = []
    t, T = 0, len(best)
    while t < T:
        lab = int(best[t])
        end = t + 1
        while end < T and best[end] == lab:
            end += 1
        if lab != b:
            labels.append(lab)
            spans.append((t, end))
        t = end
    if labels:
        return labels, spans, False
    # all blank: keep the frame with the most non-blank probability mass
    nonblank = np.delete(lp, b, axis=1)
    m = nonblank.max(axis=1, keepdims=True)
    mass = m[:, 0] + np.log(np.exp(nonblank - m).sum(axis=1))
    t = int(np.argmax(mass))
    return [DEGENERATE], [(t, t + 1)], True


def averaging_matrix(spans: Sequence[tuple[int, int]], n_frames: int, n_rows: int | None = None) -> np.ndarray:
    rows = len(spans) if n_rows is None else n_rows
    M = np.zeros((rows, n_frames))
    for i, (s, e) in enumerate(spans):
        M[i, s:e] = 1.0 / (e - s)
    return M


def shrink(h_hat: Tensor, frame_log_probs, blank: int | None = None) -> ShrinkOutput:
    lp = frame_log_probs.data if isinstance(frame_log_probs, Tensor) else np.asarray(frame_log_probs)
    if lp.shape[0] != h_hat.shape[0]:
        raise ValueError(f"frame counts differ: states {h_hat.shape[0]}, posteriors {lp.shape[0]}")
    labels, spans, degenerate = find_runs(lp, blank)
    h_prime = matmul(Tensor(averaging_matrix(spans, lp.shape[0])), h_hat)
    return ShrinkOutput(h_prime, labels, spans, degenerate)


def shrink_batch(h_hat: Tensor, frame_log_probs: np.ndarray, lengths: Sequence[int], blank: int | None = None) -> BatchShrink:
    """Shrink a padded ``[B, T, d]`` batch; output is padded to the longest shrunk length."""
    B, T, _ = h_hat.shape
    found = [find_runs(frame_log_probs[i, : int(lengths[i])], blank) for i in range(B)]
    L = max(len(f[0]) for f in found)
    M = np.zeros((B, L, T))
    for i, (_, spans, _) in enumerate(found):
        M[i] = averaging_matrix(spans, T, L)
    return BatchShrink(
        h_prime=matmul(Tensor(M), h_hat),
        lengths=np.array([len(f[0]) for f in found]),
        runs=[f[0] for f in found],
        spans=[f[1] for f in found],
        degenerate=np.array([f[2] for f in found]),
    )


def shrink_length_error(run_labels: Sequence[int], gold_phonemes: Sequence[int]) -> int:
    return abs(len(run_labels) - len(gold_phonemes))
