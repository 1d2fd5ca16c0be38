# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Loop order is fixed so results do not depend on threading."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()

# exp(-x) underflows to exactly 0.0 for x > ~745.2, so skipping those terms
# leaves every sum bit-identical.
cdef double _CUTOFF = 1491.0


def gaussian_mixture_density(x, centers, weights, whiten, double norm):
    cdef double[:, ::1] xw = np.ascontiguousarray(np.asarray(x, dtype=float) @ np.asarray(whiten).T)
    cdef double[:, ::1] cw = np.ascontiguousarray(np.asarray(centers, dtype=float) @ np.asarray(whiten).T)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=float)
    cdef Py_ssize_t n_out = xw.shape[0], n_in = cw.shape[0], d = xw.shape[1]
    out_arr = np.empty(n_out)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, d2, diff
    with nogil:
        for i in range(n_out):
            acc = 0.0
            for j in range(n_in):
                if w[j] == 0.0:
                    continue
                d2 = 0.0
                for k in range(d):
                    diff = xw[i, k] - cw[j, k]
                    d2 = d2 + diff * diff
                if d2 < _CUTOFF:
                    acc = acc + w[j] * exp(-0.5 * d2)
            out[i] = acc * norm
    return out_arr


def cic_deposit(points, masses, lo, step, n):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=float)
    cdef double[::1] m = np.ascontiguousarray(masses, dtype=float)
    cdef double[::1] lo_v = np.ascontiguousarray(lo, dtype=float)
    cdef double[::1] st_v = np.ascontiguousarray(step, dtype=float)
    cdef cnp.int64_t[::1] n_v = np.ascontiguousarray(n, dtype=np.int64)
    cdef Py_ssize_t npts = p.shape[0], d = p.shape[1]
    cdef Py_ssize_t total = 1
    cdef Py_ssize_t k
    for k in range(d):
        total *= n_v[k]
    grid_arr = np.zeros(total)
    cdef double[::1] grid = grid_arr
    base_arr = np.empty(d, dtype=np.int64)
    frac_arr = np.empty(d)
    cdef cnp.int64_t[::1] base = base_arr
    cdef double[::1] frac = frac_arr
    cdef Py_ssize_t i, corner, ncorner = 1 << d, idx, ik, bit
    cdef double s, wt, deposited = 0.0, total_mass = 0.0
    cdef bint valid
    with nogil:
        for i in range(npts):
            total_mass = total_mass + m[i]
            if m[i] == 0.0:
                continue
            for k in range(d):
                s = (p[i, k] - lo_v[k]) / st_v[k] - 0.5
                base[k] = <cnp.int64_t>floor(s)
                frac[k] = s - base[k]
            for corner in range(ncorner):
                idx = 0
                wt = m[i]
                valid = True
                for k in range(d):
                    bit = (corner >> k) & 1
                    ik = base[k] + bit
                    if bit:
                        wt = wt * frac[k]
                    else:
                        wt = wt * (1.0 - frac[k])
                    if ik < 0 or ik >= n_v[k]:
                        valid = False
                        break
                    idx = idx * n_v[k] + ik
                if valid:
                    grid[idx] = grid[idx] + wt
                    deposited = deposited + wt
    outside = total_mass - deposited
    return grid_arr.reshape(tuple(int(v) for v in n)), max(outside, 0.0)
