"""Pure numpy versions of the hot loops.

Both functions have compiled twins in ``_kernels.pyx`` with identical
signatures; :mod:`splitjko.kernels` picks one at import time.
"""
import numpy as np
from scipy.special import logsumexp


def softmin_rows(h, cost, eps):
    """``out[b, i] = eps * log(sum_j exp((h[b, j] - cost[i, j]) / eps))``."""
    z = (h[:, None, :] - cost[None, :, :]) / eps
    with np.errstate(invalid="ignore"):
        out = eps * logsumexp(z, axis=2)
    return np.where(np.isnan(out), -np.inf, out)


def quantile_l2(s0a, s1a, x0a, x1a, s0b, s1b, x0b, x1b):
    """Squared L2 distance on [0, 1] between two piecewise-linear quantile
    functions, each given as segments ``(s0, s1) -> (x0, x1)`` of positive
    length in ``s``."""
    knots = np.union1d(np.concatenate([s0a, s1a[-1:]]), np.concatenate([s0b, s1b[-1:]]))
    lo = max(s0a[0], s0b[0])
    hi = min(s1a[-1], s1b[-1])
    knots = knots[(knots >= lo) & (knots <= hi)]
    u, v = knots[:-1], knots[1:]
    keep = v > u
    u, v = u[keep], v[keep]
    mid = 0.5 * (u + v)

    def evaluate(s0, s1, x0, x1):
        k = np.clip(np.searchsorted(s0, mid, side="right") - 1, 0, len(s0) - 1)
        slope = (x1[k] - x0[k]) / (s1[k] - s0[k])
        return x0[k] + slope * (u - s0[k]), x0[k] + slope * (v - s0[k])

    au, av = evaluate(s0a, s1a, x0a, x1a)
    bu, bv = evaluate(s0b, s1b, x0b, x1b)
    d0, d1 = au - bu, av - bv
    return float(np.sum((v - u) * (d0 * d0 + d0 * d1 + d1 * d1) / 3.0))
