# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels (see _ref.py for reference)."""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, fabs, fmod

cnp.import_array()

cdef double PI = 3.141592653589793238462643383279502884


def pair_response(cnp.complex128_t[::1] w, cnp.complex128_t[:, ::1] h,
                  cnp.complex128_t[::1] f):
    """Combined beam-pair response w^H H f (no noise)."""
    cdef Py_ssize_t i, j, nu = h.shape[0], nb = h.shape[1]
    cdef double complex acc = 0.0, row
    for i in range(nu):
        row = 0.0
        for j in range(nb):
            row = row + h[i, j] * f[j]
        acc = acc + w[i].conjugate() * row
    return complex(acc)


def wrapped_angle_diff(a, b):
    """Distance between angles on the folded half circle, in [0, pi/2]."""
    a_arr = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b_arr = np.atleast_1d(np.asarray(b, dtype=np.float64))
    if a_arr.shape != b_arr.shape:
        a_arr, b_arr = np.broadcast_arrays(a_arr, b_arr)
        a_arr = np.ascontiguousarray(a_arr)
        b_arr = np.ascontiguousarray(b_arr)
    out = np.empty(a_arr.shape[0], dtype=np.float64)
    cdef double[::1] av = a_arr, bv = b_arr, ov = out
    cdef Py_ssize_t i
    cdef double d
    for i in range(av.shape[0]):
        d = fmod(fabs(av[i] - bv[i]), PI)
        ov[i] = d if d <= PI - d else PI - d
    if np.isscalar(a) and np.isscalar(b):
        return float(out[0])
    return out


def bearing_loglik(double[::1] src_x, double[::1] src_y,
                   double[::1] dst_x, double[::1] dst_y,
                   double theta, double sigma):
    """Gaussian log-likelihood of a folded bearing measurement."""
    cdef Py_ssize_t n = src_x.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double b, d, inv2s2 = 1.0 / (2.0 * sigma * sigma)
    for i in range(n):
        b = fmod(atan2(dst_y[i] - src_y[i], dst_x[i] - src_x[i]) + 0.5 * PI, PI)
        if b < 0.0:
            b += PI
        d = fmod(fabs(b - theta), PI)
        if d > PI - d:
            d = PI - d
        ov[i] = -(d * d) * inv2s2
    return out


def systematic_resample(double[::1] weights, double u0):
    """Systematic resampling: indices drawn at positions (u0 + k)/n."""
    cdef Py_ssize_t n = weights.shape[0], i = 0, j = 0
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    cdef double cum = weights[0], pos
    for i in range(n):
        pos = (u0 + i) / n
        while pos >= cum and j < n - 1:
            j += 1
            cum += weights[j]
        ov[i] = j
    return out
