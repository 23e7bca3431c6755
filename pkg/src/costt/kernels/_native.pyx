# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled CTC forward-backward and Levenshtein kernels."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, INFINITY, fabs

cnp.import_array()


cdef inline double _lae(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log1p(exp(b - a))
    return b + log1p(exp(a - b))


def ctc_forward_backward(double[:, ::1] log_probs, const long long[::1] target, int blank):
    """Return (-log p(target), d(-log p)/d log_probs) for one utterance."""
    cdef Py_ssize_t T = log_probs.shape[0]
    cdef Py_ssize_t V = log_probs.shape[1]
    cdef Py_ssize_t U = target.shape[0]
    cdef Py_ssize_t S = 2 * U + 1
    cdef Py_ssize_t t, s, k
    cdef double a, b, logp
    grad_arr = np.zeros((T, V), dtype=np.float64)
    cdef double[:, ::1] grad = grad_arr
    if T == 0:
        return (np.inf, grad_arr)
    lab_arr = np.empty(S, dtype=np.int64)
    cdef long long[::1] lab = lab_arr
    for s in range(S):
        lab[s] = blank if s % 2 == 0 else target[(s - 1) // 2]
    alpha_arr = np.full((T, S), -np.inf)
    beta_arr = np.full((T, S), -np.inf)
    cdef double[:, ::1] alpha = alpha_arr
    cdef double[:, ::1] beta = beta_arr

    with nogil:
        alpha[0, 0] = log_probs[0, blank]
        if S > 1:
            alpha[0, 1] = log_probs[0, lab[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _lae(a, alpha[t - 1, s - 1])
                if s >= 2 and lab[s] != blank and lab[s] != lab[s - 2]:
                    a = _lae(a, alpha[t - 1, s - 2])
                if a != -INFINITY:
                    alpha[t, s] = a + log_probs[t, lab[s]]
        logp = alpha[T - 1, S - 1]
        if S > 1:
            logp = _lae(logp, alpha[T - 1, S - 2])
    if logp == -INFINITY:
        return (np.inf, grad_arr)

    with nogil:
        beta[T - 1, S - 1] = log_probs[T - 1, lab[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = log_probs[T - 1, lab[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                b = beta[t + 1, s]
                if s + 1 < S:
                    b = _lae(b, beta[t + 1, s + 1])
                if s + 2 < S and lab[s + 2] != blank and lab[s + 2] != lab[s]:
                    b = _lae(b, beta[t + 1, s + 2])
                if b != -INFINITY:
                    beta[t, s] = b + log_probs[t, lab[s]]
        for t in range(T):
            for s in range(S):
                a = alpha[t, s] + beta[t, s]
                if a != -INFINITY:
                    k = lab[s]
                    grad[t, k] -= exp(a - log_probs[t, k] - logp)
    return (-logp, grad_arr)


def edit_distance(const long long[::1] ref, const long long[::1] hyp):
    """Levenshtein distance with (substitutions, insertions, deletions) of one optimal script."""
    cdef Py_ssize_t n = ref.shape[0]
    cdef Py_ssize_t m = hyp.shape[0]
    cdef Py_ssize_t i, j
    cdef long long c, best
    d_arr = np.empty((n + 1, m + 1), dtype=np.int64)
    cdef long long[:, ::1] d = d_arr
    cdef long long sub = 0, ins = 0, dels = 0
    with nogil:
        for i in range(n + 1):
            d[i, 0] = i
        for j in range(m + 1):
            d[0, j] = j
        for i in range(1, n + 1):
            for j in range(1, m + 1):
                c = 0 if ref[i - 1] == hyp[j - 1] else 1
                best = d[i - 1, j - 1] + c
                if d[i - 1, j] + 1 < best:
                    best = d[i - 1, j] + 1
                if d[i, j - 1] + 1 < best:
                    best = d[i, j - 1] + 1
                d[i, j] = best
        i = n
        j = m
        while i > 0 or j > 0:
            if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
                if ref[i - 1] != hyp[j - 1]:
                    sub += 1
                i -= 1
                j -= 1
            elif i > 0 and d[i, j] == d[i - 1, j] + 1:
                dels += 1
                i -= 1
            else:
                ins += 1
                j -= 1
    return (int(d[n, m]), int(sub), int(ins), int(dels))
