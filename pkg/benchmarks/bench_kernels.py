"""Time the compiled kernels against the numpy/Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one row per (kernel, size) with the best-of-N wall time for each
backend and the speed-up. Results from both backends are also compared so a
drift between them shows up here as well as in the test suite.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from costt import kernels


def ctc_case(T: int, V: int, U: int, seed: int = 0):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(T, V))
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    target = r.integers(0, V - 1, size=U)
    return lp, target, V - 1


def edit_case(n: int, alphabet: int = 30, seed: int = 0):
    r = np.random.default_rng(seed)
    return r.integers(0, alphabet, size=n), r.integers(0, alphabet, size=n + n // 10)


def best_of(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "native" not in kernels.BACKENDS:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    native, python = kernels.get("native"), kernels.get("python")

    rows = []
    for T, V, U in ((50, 30, 15), (200, 60, 60), (600, 150, 150)):
        lp, tgt, blank = ctc_case(T, V, U)
        a, b = native.ctc_forward_backward(lp, tgt, blank), python.ctc_forward_backward(lp, tgt, blank)
        assert abs(a[0] - b[0]) < 1e-9 and np.allclose(a[1], b[1], atol=1e-9)
        tn = best_of(lambda: native.ctc_forward_backward(lp, tgt, blank), args.repeat)
        tp = best_of(lambda: python.ctc_forward_backward(lp, tgt, blank), args.repeat)
        rows.append((f"ctc T={T} V={V} U={U}", tn, tp))
    for n in (10, 50, 200):
        ref, hyp = edit_case(n)
        assert native.edit_distance(ref, hyp) == python.edit_distance(ref, hyp)
        tn = best_of(lambda: native.edit_distance(ref, hyp), args.repeat)
        tp = best_of(lambda: python.edit_distance(ref, hyp), args.repeat)
        rows.append((f"edit_distance n={n}", tn, tp))

    print(f"{'kernel':<28}{'native':>12}{'python':>12}{'speed-up':>10}")
    for name, tn, tp in rows:
        print(f"{name:<28}{tn * 1e6:>10.1f}us{tp * 1e6:>10.1f}us{tp / tn:>9.1f}x")


if __name__ == "__main__":
    main()
