"""Pure NumPy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature
and the same tie-breaking conventions; ``geomext.kernels`` picks one at
import time.
"""

from __future__ import annotations

import numpy as np


def calibration_index(n: int, tau: float) -> int:
    """0-based index of the order statistic used as the tau-quantile.

    With this choice exactly ``n - 1 - index`` values (fewer under ties) lie
    strictly above it, i.e. a fraction within 1/n of ``1 - tau``.
    """
    k = int(np.ceil(n * tau - 1e-9)) - 1
    return min(max(k, 0), n - 1)


def pairwise_loglik(ZT, pi, pj, rho, tau):
    """Bivariate truncated-gamma log-likelihoods, one per site pair.

    ``ZT`` is the transposed data matrix (sites x days). Gamma shape 2
    (lambda = 1, d = 2), Gaussian gauge with correlation ``rho[p]`` between
    sites ``pi[p]`` and ``pj[p]``. Each pair
    calibrates its own threshold constant as the tau-quantile of r*g(w).

    Returns ``(loglik, c_tau, n_exceed)`` arrays of length ``len(pi)``.
    """
    ZT = np.asarray(ZT, dtype=np.float64)
    npairs = len(pi)
    ll = np.empty(npairs)
    cs = np.empty(npairs)
    ne = np.empty(npairs, dtype=np.int64)
    for p in range(npairs):
        zi = ZT[pi[p]]
        zj = ZT[pj[p]]
        r = zi + zj
        ok = r > 0
        if not np.all(ok):
            zi, zj, r = zi[ok], zj[ok], r[ok]
        rh = rho[p]
        # r * g(w) with g the gamma=2 Gaussian gauge
        s = (r - 2.0 * rh * np.sqrt(zi * zj)) * (1.0 / (1.0 - rh * rh))
        k = calibration_index(len(s), tau)
        c = np.partition(s, k)[k]
        m = s > c
        cnt = int(np.count_nonzero(m))
        sm = s[m]
        ll[p] = np.sum(np.log(sm * sm / r[m]) - sm) - cnt * (np.log1p(c) - c)
        cs[p] = c
        ne[p] = cnt
    return ll, cs, ne


def gauge_batch(W, Linv, gamma):
    """Generalised Gaussian gauge for each row of ``W``.

    ``Linv`` is the inverse of the lower Cholesky factor of the correlation
    matrix, so the quadratic form x' S^-1 x equals ||Linv x||^2.
    """
    X = np.power(np.asarray(W, dtype=np.float64), 1.0 / gamma)
    Y = X @ np.asarray(Linv).T
    q = np.einsum("ij,ij->i", Y, Y)
    return np.power(q, 0.5 * gamma)


def critical_scale(Y, q, m):
    """Smallest c with ``#{j: c*Y[i,j] > q[j]} >= m`` (as an infimum).

    Equals the m-th smallest ratio q_j / Y[i,j]; non-positive entries give
    an infinite ratio. Row i scaled by c lies in the set iff c > result[i].
    """
    Y = np.asarray(Y, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(Y > 0, np.asarray(q, dtype=np.float64) / Y, np.inf)
    return np.partition(ratio, m - 1, axis=1)[:, m - 1]


def window_critical_scale(B, q, m, run_len):
    """:func:`critical_scale` for blocks of consecutive day-vectors.

    ``B`` has shape (n_blocks, block_len, d). For each window of ``run_len``
    consecutive days the componentwise minimum is taken; the block's value
    is the smallest window value.
    """
    B = np.asarray(B, dtype=np.float64)
    nb, L, d = B.shape
    best = np.full(nb, np.inf)
    for s in range(L - run_len + 1):
        y = B[:, s:s + run_len, :].min(axis=1)
        best = np.minimum(best, critical_scale(y, q, m))
    return best


def at_least_m(Y, q, m):
    return np.count_nonzero(np.asarray(Y) > np.asarray(q), axis=1) >= m


def joint_exceedance_counts(E):
    """d x d matrix of joint exceedance counts from a boolean n x d matrix."""
    F = np.asarray(E, dtype=np.float64)
    return np.rint(F.T @ F).astype(np.int64)
