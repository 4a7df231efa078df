"""Compare the compiled kernels against the numpy fallback.

Run with ``python3 benchmarks/bench_kernels.py``.
"""
import timeit

import numpy as np

from splitjko import _kernels_py

try:
    from splitjko import _kernels
except ImportError:
    _kernels = None


def _softmin_case(n, batch, rng):
    x = np.linspace(0.0, 1.0, n)
    cost = np.subtract.outer(x, x) ** 2
    return np.ascontiguousarray(rng.normal(size=(batch, n))), cost, 1e-3


def _quantile_case(n, rng):
    out = []
    for _ in range(2):
        s = np.concatenate([[0.0], np.sort(rng.uniform(0, 1, n - 1)), [1.0]])
        x = np.cumsum(rng.uniform(0.1, 1.0, n + 1))
        out += [s[:-1].copy(), s[1:].copy(), x[:-1].copy(), x[1:].copy()]
    return out


def _time(f, args, repeat=5):
    number = max(1, int(0.2 / max(timeit.timeit(lambda: f(*args), number=1), 1e-6)))
    return min(timeit.repeat(lambda: f(*args), number=number, repeat=repeat)) / number


def main():
    rng = np.random.default_rng(0)
    cases = [(f"softmin_rows n={n}", "softmin_rows", _softmin_case(n, n, rng)) for n in (32, 64, 128)]
    cases += [(f"quantile_l2 n={n}", "quantile_l2", _quantile_case(n, rng)) for n in (256, 4096)]
    print(f"{'kernel':<24}{'python [ms]':>14}{'compiled [ms]':>16}{'speedup':>10}")
    for label, name, args in cases:
        tp = _time(getattr(_kernels_py, name), args) * 1e3
        if _kernels is None:
            print(f"{label:<24}{tp:>14.3f}{'n/a':>16}{'':>10}")
            continue
        tc = _time(getattr(_kernels, name), args) * 1e3
        print(f"{label:<24}{tp:>14.3f}{tc:>16.3f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
