# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror :mod:`medstat._kernels_py`."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def highpass_fb(const double[:, ::1] x, double alpha):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], i, j
    out_arr = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] y = out_arr
    cdef double prev_y, prev_x, cur
    for j in range(c):
        prev_y = 0.0
        prev_x = x[0, j]
        for i in range(n):
            prev_y = alpha * (prev_y + x[i, j] - prev_x)
            prev_x = x[i, j]
            y[i, j] = prev_y
        prev_y = 0.0
        prev_x = y[n - 1, j]
        for i in range(n - 1, -1, -1):
            cur = y[i, j]
            prev_y = alpha * (prev_y + cur - prev_x)
            prev_x = cur
            y[i, j] = prev_y
    return out_arr


def softmax_rows(const double[:, :, ::1] s):
    cdef Py_ssize_t h = s.shape[0], n = s.shape[1], m = s.shape[2], a, i, j
    out_arr = np.empty((h, n, m), dtype=np.float64)
    cdef double[:, :, ::1] p = out_arr
    cdef double mx, tot, inv
    for a in range(h):
        for i in range(n):
            mx = s[a, i, 0]
            for j in range(1, m):
                if s[a, i, j] > mx:
                    mx = s[a, i, j]
            tot = 0.0
            for j in range(m):
                p[a, i, j] = exp(s[a, i, j] - mx)
                tot += p[a, i, j]
            inv = 1.0 / tot
            for j in range(m):
                p[a, i, j] *= inv
    return out_arr


def softmax_rows_backward(const double[:, :, ::1] p, const double[:, :, ::1] dp):
    cdef Py_ssize_t h = p.shape[0], n = p.shape[1], m = p.shape[2], a, i, j
    out_arr = np.empty((h, n, m), dtype=np.float64)
    cdef double[:, :, ::1] ds = out_arr
    cdef double dot
    for a in range(h):
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += p[a, i, j] * dp[a, i, j]
            for j in range(m):
                ds[a, i, j] = p[a, i, j] * (dp[a, i, j] - dot)
    return out_arr


def layernorm_forward(const double[:, ::1] x, const double[::1] gain,
                      const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mean, var, r
    for i in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            var += (x[i, j] - mean) * (x[i, j] - mean)
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            xhat[i, j] = (x[i, j] - mean) * r
            y[i, j] = xhat[i, j] * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layernorm_backward(const double[:, ::1] dy, const double[:, ::1] xhat,
                       const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dx_arr = np.empty((n, d), dtype=np.float64)
    dg_arr = np.zeros(d, dtype=np.float64)
    db_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dg = dg_arr
    cdef double[::1] db = db_arr
    cdef double s1, s2, g
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = dy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
            dg[j] += dy[i, j] * xhat[i, j]
            db[j] += dy[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            dx[i, j] = rstd[i] * (dy[i, j] * gain[j] - s1 - xhat[i, j] * s2)
    return dx_arr, dg_arr, db_arr
