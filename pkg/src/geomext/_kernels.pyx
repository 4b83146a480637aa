# distutils: language = c++
# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Same signatures and conventions as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, log1p, pow, INFINITY
from libc.stdlib cimport malloc, free
from libcpp.algorithm cimport nth_element

cnp.import_array()

DEF _NBINS = 4096


cdef inline double _select(double* a, Py_ssize_t n, Py_ssize_t k) noexcept nogil:
    # k-th smallest (0-based), partially reorders a
    nth_element(a, a + k, a + n)
    return a[k]


cdef double _bucket_select(double* a, Py_ssize_t n, Py_ssize_t k, double lo, double hi,
                           Py_ssize_t* hist, double* buf) noexcept nogil:
    # k-th smallest of a[0:n] (range [lo, hi]) without reordering a; buf must
    # hold n doubles. The bin map is monotone in the value, so the answer lies
    # in the first bin whose cumulative count exceeds k.
    cdef Py_ssize_t i, b, cum = 0, m = 0
    cdef double scale
    if hi <= lo:
        return lo
    scale = (_NBINS - 1) / (hi - lo)
    for b in range(_NBINS):
        hist[b] = 0
    for i in range(n):
        hist[<Py_ssize_t> ((a[i] - lo) * scale)] += 1
    b = 0
    while cum + hist[b] <= k:
        cum += hist[b]
        b += 1
    for i in range(n):
        if <Py_ssize_t> ((a[i] - lo) * scale) == b:
            buf[m] = a[i]
            m += 1
    return _select(buf, m, k - cum)


cdef inline double _small_select(double* a, Py_ssize_t n, Py_ssize_t m, double* keep) noexcept nogil:
    # m-th smallest (1-based) for short rows: keep the m smallest seen so far, sorted
    cdef Py_ssize_t i, j, filled = 0
    cdef double v
    for i in range(n):
        v = a[i]
        if filled < m:
            j = filled
            filled += 1
        elif v < keep[m - 1]:
            j = m - 1
        else:
            continue
        while j > 0 and keep[j - 1] > v:
            keep[j] = keep[j - 1]
            j -= 1
        keep[j] = v
    return keep[m - 1]


def calibration_index(Py_ssize_t n, double tau):
    from geomext._kernels_py import calibration_index as ci
    return ci(n, tau)


def pairwise_loglik(const double[:, ::1] ZT, const Py_ssize_t[::1] pi, const Py_ssize_t[::1] pj,
                    const double[::1] rho, double tau):
    cdef Py_ssize_t n = ZT.shape[1]
    cdef Py_ssize_t npairs = pi.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ll = np.empty(npairs)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cs = np.empty(npairs)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] ne = np.empty(npairs, dtype=np.int64)
    cdef double* s = <double*> malloc(n * sizeof(double))
    cdef double* sel = <double*> malloc(n * sizeof(double))
    cdef Py_ssize_t* hist = <Py_ssize_t*> malloc(_NBINS * sizeof(Py_ssize_t))
    cdef double* r = <double*> malloc(n * sizeof(double))
    cdef Py_ssize_t p, t, nv, k, cnt, a, b
    cdef double zi, zj, rt, rh, den, c, acc, prod, v, lo, hi
    cdef int batch
    if s == NULL or sel == NULL or r == NULL or hist == NULL:
        free(s); free(sel); free(r); free(hist)
        raise MemoryError()
    try:
        with nogil:
            for p in range(npairs):
                a = pi[p]
                b = pj[p]
                rh = rho[p]
                den = 1.0 / (1.0 - rh * rh)
                nv = 0
                lo = INFINITY
                hi = -INFINITY
                for t in range(n):
                    zi = ZT[a, t]
                    zj = ZT[b, t]
                    rt = zi + zj
                    if rt > 0:
                        # r * g(w) with g the gamma=2 Gaussian gauge
                        s[nv] = (rt - 2.0 * rh * sqrt(zi * zj)) * den
                        r[nv] = rt
                        if s[nv] < lo:
                            lo = s[nv]
                        if s[nv] > hi:
                            hi = s[nv]
                        nv += 1
                k = <Py_ssize_t> (nv * tau - 1e-9)
                if k < nv * tau - 1e-9:
                    k += 1
                k -= 1
                if k < 0:
                    k = 0
                if k > nv - 1:
                    k = nv - 1
                c = _bucket_select(s, nv, k, lo, hi, hist, sel)
                # sum of log(s^2/r) - s; logs taken of short running products
                acc = 0.0
                prod = 1.0
                batch = 0
                cnt = 0
                for t in range(nv):
                    if s[t] > c:
                        v = s[t] * s[t] / r[t]
                        prod *= v
                        acc -= s[t]
                        batch += 1
                        cnt += 1
                        if batch == 8 or prod > 1e200 or prod < 1e-200:
                            acc += log(prod)
                            prod = 1.0
                            batch = 0
                acc += log(prod)
                ll[p] = acc - cnt * (log1p(c) - c)
                cs[p] = c
                ne[p] = cnt
    finally:
        free(s); free(sel); free(r); free(hist)
    return ll, cs, ne


def gauge_batch(const double[:, ::1] W, const double[:, ::1] Linv, double gamma):
    cdef Py_ssize_t n = W.shape[0], d = W.shape[1], i, j, l
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n)
    cdef double* x = <double*> malloc(d * sizeof(double))
    cdef double inv = 1.0 / gamma, half = 0.5 * gamma, q, y
    if x == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                for j in range(d):
                    x[j] = pow(W[i, j], inv)
                q = 0.0
                for l in range(d):
                    y = 0.0
                    for j in range(l + 1):
                        y += Linv[l, j] * x[j]
                    q += y * y
                out[i] = pow(q, half)
    finally:
        free(x)
    return out


def critical_scale(const double[:, ::1] Y, const double[::1] q, Py_ssize_t m):
    cdef Py_ssize_t n = Y.shape[0], d = Y.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n)
    cdef double* buf = <double*> malloc(2 * d * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                for j in range(d):
                    if Y[i, j] > 0:
                        buf[j] = q[j] / Y[i, j]
                    else:
                        buf[j] = INFINITY
                out[i] = _small_select(buf, d, m, buf + d)
    finally:
        free(buf)
    return out


def window_critical_scale(const double[:, :, ::1] B, const double[::1] q, Py_ssize_t m, Py_ssize_t run_len):
    cdef Py_ssize_t nb = B.shape[0], L = B.shape[1], d = B.shape[2], i, s, j, u
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(nb)
    cdef double* buf = <double*> malloc(2 * d * sizeof(double))
    cdef double y, c, best
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(nb):
                best = INFINITY
                for s in range(L - run_len + 1):
                    for j in range(d):
                        y = B[i, s, j]
                        for u in range(1, run_len):
                            if B[i, s + u, j] < y:
                                y = B[i, s + u, j]
                        if y > 0:
                            buf[j] = q[j] / y
                        else:
                            buf[j] = INFINITY
                    c = _small_select(buf, d, m, buf + d)
                    if c < best:
                        best = c
                out[i] = best
    finally:
        free(buf)
    return out


def at_least_m(const double[:, ::1] Y, const double[::1] q, Py_ssize_t m):
    cdef Py_ssize_t n = Y.shape[0], d = Y.shape[1], i, j, cnt
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.empty(n, dtype=np.uint8)
    with nogil:
        for i in range(n):
            cnt = 0
            for j in range(d):
                if Y[i, j] > q[j]:
                    cnt += 1
            out[i] = cnt >= m
    return out.view(np.bool_)


def joint_exceedance_counts(const cnp.uint8_t[:, ::1] E):
    cdef Py_ssize_t n = E.shape[0], d = E.shape[1], t, a, b, k
    cdef cnp.ndarray[cnp.int64_t, ndim=2] C = np.zeros((d, d), dtype=np.int64)
    cdef Py_ssize_t* idx = <Py_ssize_t*> malloc(d * sizeof(Py_ssize_t))
    if idx == NULL:
        raise MemoryError()
    try:
        for t in range(n):
            k = 0
            for a in range(d):
                if E[t, a]:
                    idx[k] = a
                    k += 1
            for a in range(k):
                for b in range(k):
                    C[idx[a], idx[b]] += 1
    finally:
        free(idx)
    return C
