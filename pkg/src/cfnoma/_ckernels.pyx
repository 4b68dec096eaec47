# cython: language_level=3
"""Compiled per-cell interference and rate loops.

Array conventions match ``cfnoma._kernels_py``; the two must agree to
rounding.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport log2

cnp.import_array()


def cell_interference(double[:, :, ::1] S, double[:, ::1] ici, double[:, :, ::1] beta):
    cdef Py_ssize_t B = S.shape[0], K = S.shape[1]
    cdef Py_ssize_t b, i, k, u
    cdef double acc, coef
    out = np.empty((B, K, K), dtype=np.float64)
    cdef double[:, :, ::1] intf = out
    for b in range(B):
        for i in range(K):
            for k in range(K):
                acc = 0.0
                if i == k:
                    for u in range(K):
                        if u != k:
                            acc += (1.0 - beta[b, k, u]) * S[b, k, u]
                else:
                    for u in range(K):
                        if u < k:
                            coef = 1.0 - beta[b, i, u] + beta[b, i, u] * beta[b, u, k]
                        elif u > k:
                            coef = 1.0 - beta[b, i, u] * beta[b, k, u]
                        else:
                            continue
                        acc += coef * S[b, i, u]
                intf[b, i, k] = acc + ici[b, i]
    return out


def convex_interference(double[:, :, ::1] S, double[:, ::1] ici, double[:, :, ::1] beta_t):
    cdef Py_ssize_t B = S.shape[0], K = S.shape[1]
    cdef Py_ssize_t b, i, k, u
    cdef double acc, x, y
    out = np.empty((B, K, K), dtype=np.float64)
    cdef double[:, :, ::1] intf = out
    for b in range(B):
        for i in range(K):
            for k in range(K):
                acc = 0.0
                if i == k:
                    for u in range(K):
                        if u != k:
                            acc += beta_t[b, k, u] * S[b, k, u]
                else:
                    for u in range(K):
                        if u < k:
                            x = beta_t[b, i, u]
                            y = 1.0 - beta_t[b, u, k]
                        elif u > k:
                            x = beta_t[b, i, u]
                            y = beta_t[b, k, u]
                        else:
                            continue
                        acc += (x if x > y else y) * S[b, i, u]
                intf[b, i, k] = acc + ici[b, i]
    return out


def cell_rates(double[:, :, ::1] S, double[:, ::1] ici, double[:, :, ::1] beta, double sigma2):
    cdef Py_ssize_t B = S.shape[0], K = S.shape[1]
    cdef Py_ssize_t b, i, k
    cdef double best, val
    cdef Py_ssize_t arg
    intf_arr = cell_interference(S, ici, beta)
    cdef double[:, :, ::1] intf = intf_arr
    r_arr = np.empty((B, K, K), dtype=np.float64)
    R_arr = np.empty((B, K), dtype=np.float64)
    arg_arr = np.empty((B, K), dtype=np.intp)
    cdef double[:, :, ::1] r = r_arr
    cdef double[:, ::1] R = R_arr
    cdef Py_ssize_t[:, ::1] argmin = arg_arr
    for b in range(B):
        for i in range(K):
            for k in range(K):
                r[b, i, k] = log2(1.0 + S[b, i, k] / (intf[b, i, k] + sigma2))
        for k in range(K):
            best = 0.0
            arg = -1
            for i in range(K):
                val = beta[b, i, k] * r[b, i, k] + (1.0 - beta[b, i, k]) * r[b, k, k]
                if arg < 0 or val < best:
                    best = val
                    arg = i
            R[b, k] = best
            argmin[b, k] = arg
    return intf_arr, r_arr, R_arr, arg_arr
