"""Log-log regression used by every slope check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PowerFit:
    """``y ~ C x^slope``; ``intercept`` is ``log C``."""

    slope: float
    intercept: float
    r2: float
    n: int

    @property
    def constant(self):
        return float(np.exp(self.intercept))

    def passes(self, lo=-np.inf, hi=np.inf, r2_min=0.95):
        return bool(lo <= self.slope <= hi and self.r2 >= r2_min)

    def as_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "constant": self.constant,
                "r2": self.r2, "n": self.n}


def fit_power_law(x, y) -> PowerFit:
    """Least squares of ``log y`` against ``log x``.

    Needs at least two positive pairs. With exactly two, ``r2`` is 1.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    ok = (x > 0) & (y > 0) & np.isfinite(x) & np.isfinite(y)
    lx, ly = np.log(x[ok]), np.log(y[ok])
    if lx.size < 2:
        raise ValueError("need at least two positive samples")
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + icpt)
    ss = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss if ss > 0 else 1.0
    return PowerFit(float(slope), float(icpt), float(r2), int(lx.size))
