"""Pure NumPy implementations of the hot kernels (fallback backend)."""

import numpy as np

_CHUNK = 1 << 22  # kernel matrix entries materialised at once


def gaussian_mixture_density(x, centers, weights, whiten, norm):
    """``norm * sum_i weights[i] * exp(-0.5 |whiten @ (x - centers[i])|^2)`` at every row of ``x``.

    ``whiten`` is the inverse Cholesky factor of the kernel covariance.
    """
    x = np.ascontiguousarray(x, dtype=float)
    c = np.ascontiguousarray(centers, dtype=float)
    w = np.ascontiguousarray(weights, dtype=float)
    keep = w != 0.0
    c, w = c[keep], w[keep]
    xw = x @ whiten.T
    cw = c @ whiten.T
    out = np.empty(x.shape[0])
    rows = max(1, _CHUNK // max(1, c.shape[0]))
    for start in range(0, x.shape[0], rows):
        blk = xw[start:start + rows]
        d2 = np.zeros((blk.shape[0], cw.shape[0]))
        for k in range(blk.shape[1]):
            diff = blk[:, k:k + 1] - cw[None, :, k]
            d2 += diff * diff
        out[start:start + rows] = np.sum(np.exp(-0.5 * d2) * w[None, :], axis=1)
    return out * norm


def cic_deposit(points, masses, lo, step, n):
    """Cloud-in-cell deposit of point masses onto cell-centred nodes.

    Returns ``(mass_grid, outside)`` where ``mass_grid`` has shape ``n`` and
    ``outside`` is the mass that fell beyond the outermost nodes.
    """
    points = np.ascontiguousarray(points, dtype=float)
    masses = np.ascontiguousarray(masses, dtype=float)
    d = points.shape[1]
    n = tuple(int(v) for v in n)
    s = (points - np.asarray(lo)[None, :]) / np.asarray(step)[None, :] - 0.5
    base = np.floor(s).astype(np.int64)
    frac = s - base
    total = int(np.prod(n))
    grid = np.zeros(total)
    for corner in range(1 << d):
        idx = np.zeros(points.shape[0], dtype=np.int64)
        wt = masses.copy()
        valid = np.ones(points.shape[0], dtype=bool)
        for k in range(d):
            bit = (corner >> k) & 1
            ik = base[:, k] + bit
            wt = wt * (frac[:, k] if bit else 1.0 - frac[:, k])
            valid &= (ik >= 0) & (ik < n[k])
            idx = idx * n[k] + np.clip(ik, 0, n[k] - 1)
        grid += np.bincount(idx[valid], weights=wt[valid], minlength=total)
    outside = float(np.sum(masses) - np.sum(grid))
    return grid.reshape(n), max(outside, 0.0)
