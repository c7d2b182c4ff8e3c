# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward sweep over observation intervals.

Same contract as ``icmsm._estep_py.estep``: one pass per interval, forward
vectors kept in a scratch buffer, backward vectors built on the fly while the
expected counts are accumulated.
"""
import numpy as np
from libc.math cimport log

cdef double RESCALE_BELOW = 1e-250
cdef double RESCALE_BY = 1e250
cdef double LOG_RESCALE = 575.6462732485114
cdef double LOG_FLOOR = -690.7755278982137


cdef Py_ssize_t _sweep(const double[:, :, ::1] alpha, const double[:, ::1] stay,
                       const Py_ssize_t[::1] start, const Py_ssize_t[::1] end,
                       const Py_ssize_t[::1] a, const Py_ssize_t[::1] b,
                       const unsigned char[::1] exact,
                       double[:, :, ::1] d_out, double[:, ::1] y_out,
                       double[:, ::1] fwd, double[::1] beta, double[::1] tmp,
                       bint want_counts, double* loglik) noexcept nogil:
    cdef Py_ssize_t n = start.shape[0]
    cdef Py_ssize_t H = alpha.shape[1]
    cdef Py_ssize_t i, j, g, h, s, L, kk
    cdef double acc, tot, z, inv, fg, lsc, ll
    cdef bint drop_stay

    for i in range(n):
        s = start[i]
        L = end[i] - s
        for g in range(H):
            fwd[0, g] = 0.0
        fwd[0, a[i]] = 1.0
        lsc = 0.0
        for j in range(L - 1):
            kk = s + j
            tot = 0.0
            for h in range(H):
                acc = fwd[j, h] * stay[kk, h]
                for g in range(H):
                    acc = acc + fwd[j, g] * alpha[kk, g, h]
                fwd[j + 1, h] = acc
                tot = tot + acc
            if tot < RESCALE_BELOW:
                for h in range(H):
                    fwd[j + 1, h] = fwd[j + 1, h] * RESCALE_BY
                lsc = lsc + LOG_RESCALE

        for h in range(H):
            beta[h] = 0.0
        beta[b[i]] = 1.0
        for j in range(L - 1, -1, -1):
            kk = s + j
            drop_stay = (j == L - 1) and exact[i] != 0
            z = 0.0
            for g in range(H):
                acc = 0.0
                for h in range(H):
                    acc = acc + alpha[kk, g, h] * beta[h]
                if not drop_stay:
                    acc = acc + stay[kk, g] * beta[g]
                tmp[g] = acc
                z = z + fwd[j, g] * acc
            if j == L - 1:
                if not (z > 0.0):
                    return i
                ll = log(z) - lsc
                if not (ll >= LOG_FLOOR):
                    return i
                loglik[0] = loglik[0] + ll
            if want_counts:
                inv = 1.0 / z
                for g in range(H):
                    fg = fwd[j, g] * inv
                    if fg != 0.0:
                        y_out[kk, g] = y_out[kk, g] + fg * tmp[g]
                        for h in range(H):
                            d_out[kk, g, h] = d_out[kk, g, h] + fg * alpha[kk, g, h] * beta[h]
            tot = 0.0
            for g in range(H):
                beta[g] = tmp[g]
                tot = tot + tmp[g]
            if tot < RESCALE_BELOW:
                for g in range(H):
                    beta[g] = beta[g] * RESCALE_BY
    return -1


def estep(alpha, stay, iv, bint want_counts=True):
    """Return ``(d, y, loglik, bad)``; ``bad`` is the first failing interval or -1."""
    cdef const double[:, :, ::1] al = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef const double[:, ::1] st = np.ascontiguousarray(stay, dtype=np.float64)
    K, H = al.shape[0], al.shape[1]
    d = np.zeros((K, H, H))
    y = np.zeros((K, H))
    cdef double[:, :, ::1] dv = d
    cdef double[:, ::1] yv = y
    n = len(iv)
    if n == 0:
        return d, y, 0.0, -1
    cdef const Py_ssize_t[::1] start = np.ascontiguousarray(iv.start, dtype=np.intp)
    cdef const Py_ssize_t[::1] end = np.ascontiguousarray(iv.end, dtype=np.intp)
    cdef const Py_ssize_t[::1] av = np.ascontiguousarray(iv.a, dtype=np.intp)
    cdef const Py_ssize_t[::1] bv = np.ascontiguousarray(iv.b, dtype=np.intp)
    cdef const unsigned char[::1] ex = np.ascontiguousarray(iv.exact, dtype=np.uint8)
    max_len = int((iv.end - iv.start).max())
    cdef double[:, ::1] fwd = np.empty((max_len, H))
    cdef double[::1] beta = np.empty(H)
    cdef double[::1] tmp = np.empty(H)
    cdef double loglik = 0.0
    cdef Py_ssize_t bad
    with nogil:
        bad = _sweep(al, st, start, end, av, bv, ex, dv, yv, fwd, beta, tmp,
                     want_counts, &loglik)
    return d, y, loglik, bad
