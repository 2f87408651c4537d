# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Sinkhorn kernels. Mirrors ``_kernels_py`` exactly in semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs, INFINITY

cnp.import_array()


def sqeuclidean(const double[:, ::1] x, const double[:, ::1] y):
    cdef Py_ssize_t n = x.shape[0], m = y.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] c = out
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = x[i, k] - y[j, k]
                acc += diff * diff
            c[i, j] = acc
    return out


cdef inline void _update_rows(const double[:, ::1] C, const double[::1] logb,
                              const double[::1] g, double[::1] f, double eps) nogil:
    # f_i = -eps * logsumexp_j(logb_j + (g_j - C_ij) / eps)
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    cdef double mx, s, t
    for i in range(n):
        mx = -INFINITY
        for j in range(m):
            t = logb[j] + (g[j] - C[i, j]) / eps
            if t > mx:
                mx = t
        s = 0.0
        for j in range(m):
            s += exp(logb[j] + (g[j] - C[i, j]) / eps - mx)
        f[i] = -eps * (mx + log(s))


cdef inline void _update_cols(const double[:, ::1] C, const double[::1] loga,
                              const double[::1] f, double[::1] g, double eps) nogil:
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    cdef double mx, s, t
    for j in range(m):
        mx = -INFINITY
        for i in range(n):
            t = loga[i] + (f[i] - C[i, j]) / eps
            if t > mx:
                mx = t
        s = 0.0
        for i in range(n):
            s += exp(loga[i] + (f[i] - C[i, j]) / eps - mx)
        g[j] = -eps * (mx + log(s))


cdef double _marginal_error(const double[:, ::1] C, const double[::1] loga,
                            const double[::1] logb, const double[::1] f,
                            const double[::1] g, double eps,
                            double[::1] rows, double[::1] cols) nogil:
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    cdef double p, err = 0.0
    for j in range(m):
        cols[j] = 0.0
    for i in range(n):
        rows[i] = 0.0
        for j in range(m):
            p = exp(loga[i] + logb[j] + (f[i] + g[j] - C[i, j]) / eps)
            rows[i] += p
            cols[j] += p
    for i in range(n):
        err += fabs(rows[i] - exp(loga[i]))
    for j in range(m):
        err += fabs(cols[j] - exp(logb[j]))
    return err


def sinkhorn_log(const double[:, ::1] C, const double[::1] loga,
                 const double[::1] logb, double eps, int max_iter, double tol,
                 int check_every, f_init=None, g_init=None):
    """Alternating log-domain potential updates.

    Returns ``(f, g, iterations, marginal_l1_error)``. The error is checked on
    the first iteration and then every ``check_every`` iterations.
    """
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1]
    f_arr = np.zeros(n) if f_init is None else np.array(f_init, dtype=np.float64)
    g_arr = np.zeros(m) if g_init is None else np.array(g_init, dtype=np.float64)
    cdef double[::1] f = f_arr
    cdef double[::1] g = g_arr
    cdef double[::1] rows = np.empty(n)
    cdef double[::1] cols = np.empty(m)
    cdef int it = 0
    cdef double err = INFINITY
    with nogil:
        while it < max_iter:
            it += 1
            _update_rows(C, logb, g, f, eps)
            _update_cols(C, loga, f, g, eps)
            if it == 1 or it % check_every == 0 or it == max_iter:
                err = _marginal_error(C, loga, logb, f, g, eps, rows, cols)
                if err <= tol:
                    break
    return f_arr, g_arr, it, err
