"""Log-log rate fits with bootstrap confidence intervals."""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import numpy as np

from .errors import UsageError


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through ``(log x, log y)``."""

    slope: float
    intercept: float
    ci: tuple

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "ci": list(self.ci)}


def _ols(lx, ly):
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    return float(coef[0]), float(coef[1])


def fit_rate(xs, ys, replicate_errors=None, level=0.95, n_boot=2000, seed=0) -> RateFit:
    """Fit ``log y = slope * log x + intercept``.

    Parameters
    ----------
    xs, ys : array_like
        At least three positive values each.
    replicate_errors : array_like, optional
        Shape ``(len(xs), R)``. When given, ``ys`` should be the root mean
        square over each row, and the confidence interval is a percentile
        bootstrap that resamples replicate columns jointly across rows.
        Without it the interval is the normal approximation from the
        regression's standard error.

    Raises
    ------
    UsageError
        Fewer than three points, mismatched lengths, or non-positive values.
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.size != ys.size:
        raise UsageError("xs and ys differ in length")
    if xs.size < 3:
        raise UsageError("a rate fit needs at least three points")
    if not (np.all(xs > 0) and np.all(ys > 0) and np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise UsageError("rate fits need finite positive values")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = _ols(lx, ly)
    alpha = 0.5 * (1.0 - level)
    if replicate_errors is None:
        resid = ly - (slope * lx + intercept)
        dof = xs.size - 2
        se = float(np.sqrt(np.sum(resid ** 2) / dof / np.sum((lx - lx.mean()) ** 2))) if dof > 0 else 0.0
        z = statistics.NormalDist().inv_cdf(1.0 - alpha)
        return RateFit(slope, intercept, (slope - z * se, slope + z * se))
    e2 = np.asarray(replicate_errors, dtype=float) ** 2
    if e2.ndim != 2 or e2.shape[0] != xs.size:
        raise UsageError("replicate_errors must have one row per x")
    R = e2.shape[1]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 20])))
    slopes = np.empty(n_boot)
    for b in range(n_boot):
        idx = rng.integers(0, R, R)
        yb = np.sqrt(np.mean(e2[:, idx], axis=1))
        if np.any(yb <= 0):
            slopes[b] = np.nan
            continue
        slopes[b] = _ols(lx, np.log(yb))[0]
    slopes = slopes[np.isfinite(slopes)]
    lo, hi = np.quantile(slopes, [alpha, 1.0 - alpha])
    return RateFit(slope, intercept, (float(min(lo, slope)), float(max(hi, slope))))
