"""Pure numpy/Python versions of the compiled kernels (same signatures)."""
from __future__ import annotations

import numpy as np

_NEG = -np.inf


def ctc_forward_backward(log_probs: np.ndarray, target: np.ndarray, blank: int):
    T, V = log_probs.shape
    U = len(target)
    S = 2 * U + 1
    grad = np.zeros((T, V))
    if T == 0:
        return np.inf, grad
    lab = np.full(S, blank, dtype=np.int64)
    lab[1::2] = target
    # a skip from s-2 is allowed into non-blank states whose label differs from s-2
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (lab[2:] != blank) & (lab[2:] != lab[:-2])
    emit = log_probs[:, lab]

    alpha = np.full((T, S), _NEG)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[t - 1]
            a = prev.copy()
            a[1:] = np.logaddexp(a[1:], prev[:-1])
            a[skip] = np.logaddexp(a[skip], prev[:-2][skip[2:]])
            alpha[t] = a + emit[t]
    logp = np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2]) if S > 1 else alpha[T - 1, 0]
    if logp == _NEG:
        return np.inf, grad

    beta = np.full((T, S), _NEG)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    src_skip = np.zeros(S, dtype=bool)
    src_skip[:-2] = skip[2:]
    with np.errstate(invalid="ignore"):
        for t in range(T - 2, -1, -1):
            nxt = beta[t + 1]
            b = nxt.copy()
            b[:-1] = np.logaddexp(b[:-1], nxt[1:])
            b[src_skip] = np.logaddexp(b[src_skip], nxt[2:][src_skip[:-2]])
            beta[t] = b + emit[t]
    with np.errstate(invalid="ignore"):  # -inf - -inf on unreachable states
        occ = alpha + beta - emit - logp
    post = np.where(np.isfinite(occ), np.exp(occ), 0.0)
    for s in range(S):
        grad[:, lab[s]] -= post[:, s]
    return float(-logp), grad


def edit_distance(ref, hyp):
    n, m = len(ref), len(hyp)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        d[i][0] = i
    for j in range(m + 1):
        d[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            c = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i][j] = min(d[i - 1][j - 1] + c, d[i - 1][j] + 1, d[i][j - 1] + 1)
    sub = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i][j] == d[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i][j] == d[i - 1][j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return d[n][m], int(sub), ins, dels
