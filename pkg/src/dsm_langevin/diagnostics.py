"""Log-log slope fits used by the convergence checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    stderr: float

    def ci(self, z=2.0):
        return self.slope - z * self.stderr, self.slope + z * self.stderr


def loglog_slope(x, y):
    """Least-squares slope of log|y| against log x."""
    x = np.asarray(x, dtype=float)
    y = np.abs(np.asarray(y, dtype=float))
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("loglog_slope needs strictly positive abscissae and nonzero ordinates")
    res = stats.linregress(np.log(x), np.log(y))
    return SlopeFit(float(res.slope), float(res.intercept), float(res.stderr))


def eps_grid(lo=1e-3, hi=1e-1, n=8):
    return np.geomspace(lo, hi, n)
