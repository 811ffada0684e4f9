# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numerical kernels: Cholesky primitives, the batched GLS
negative log-likelihood with analytic partials, and batched conditional
Gaussian moments.  Pure-numpy twin: ``batchcast.backend._gls_py``."""

import numpy as np

cimport numpy as cnp
from libc.math cimport log, sqrt

from ..errors import NotPositiveDefinite

cnp.import_array()

JITTER_LADDER = (1e-10, 1e-8, 1e-6)

cdef double LOG_2PI_C = 1.8378770664093453
LOG_2PI = LOG_2PI_C

cdef double _J0 = 1e-10
cdef double _J1 = 1e-8
cdef double _J2 = 1e-6


cdef int _chol_inplace(double[:, ::1] a, int n) noexcept nogil:
    """In-place lower Cholesky; returns 0 on success, failing pivot+1 else."""
    cdef int i, j, k
    cdef double acc
    for i in range(n):
        for j in range(i + 1):
            acc = a[i, j]
            for k in range(j):
                acc -= a[i, k] * a[j, k]
            if i == j:
                if acc <= 0.0 or acc != acc:
                    return i + 1
                a[i, i] = sqrt(acc)
            else:
                a[i, j] = acc / a[j, j]
    return 0


cdef int _chol_ladder(const double[:, ::1] src, double[:, ::1] work, int n,
                      double jitter) noexcept nogil:
    """Factor src + j*I into work (lower), trying the jitter ladder.

    Returns 0 on success; on success the factored matrix corresponds to
    src with the successful jitter on its diagonal."""
    cdef double j
    cdef int attempt, i, r, c
    for attempt in range(4):
        if attempt == 0:
            j = jitter
        elif attempt == 1:
            j = _J0
        elif attempt == 2:
            j = _J1
        else:
            j = _J2
        if attempt > 0 and j <= jitter:
            continue
        for r in range(n):
            for c in range(n):
                work[r, c] = src[r, c]
            work[r, r] += j
        if _chol_inplace(work, n) == 0:
            return 0
    return 1


cdef void _solve_lower(double[:, ::1] L, const double[::1] b, double[::1] y,
                       int n) noexcept nogil:
    """y = L^{-1} b (forward substitution)."""
    cdef int i, k
    cdef double acc
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * y[k]
        y[i] = acc / L[i, i]


cdef void _solve_lower_t(double[:, ::1] L, double[::1] y, double[::1] x,
                         int n) noexcept nogil:
    """x = L^{-T} y (backward substitution)."""
    cdef int i, k
    cdef double acc
    for i in range(n - 1, -1, -1):
        acc = y[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]


cdef void _invert_lower(double[:, ::1] L, double[:, ::1] linv,
                        int n) noexcept nogil:
    cdef int i, j, k
    cdef double acc
    for j in range(n):
        for i in range(n):
            linv[i, j] = 0.0
    for i in range(n):
        linv[i, i] = 1.0 / L[i, i]
        for j in range(i):
            acc = 0.0
            for k in range(j, i):
                acc -= L[i, k] * linv[k, j]
            linv[i, j] = acc / L[i, i]


def cholesky_factor(matrix, double jitter=0.0):
    """Lower Cholesky factor of ``matrix + jitter*I`` with jitter escalation."""
    cdef cnp.ndarray[double, ndim=2] src = np.ascontiguousarray(matrix, dtype=np.float64)
    cdef int n = src.shape[0]
    cdef cnp.ndarray[double, ndim=2] work = np.empty((n, n), dtype=np.float64)
    if _chol_ladder(src, work, n, jitter) != 0:
        raise NotPositiveDefinite(
            f"matrix of dim {n} has a non-positive pivot even with jitter {_J2}"
        )
    return np.tril(work)


def solve_factor(lower, b):
    """Solve (L L^T) x = b given the lower factor."""
    cdef cnp.ndarray[double, ndim=2] L = np.ascontiguousarray(lower, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] rhs = np.ascontiguousarray(b, dtype=np.float64)
    cdef int n = L.shape[0]
    cdef cnp.ndarray[double, ndim=1] y = np.empty(n, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] x = np.empty(n, dtype=np.float64)
    _solve_lower(L, rhs, y, n)
    _solve_lower_t(L, y, x, n)
    return x


def logdet_factor(lower):
    cdef cnp.ndarray[double, ndim=2] L = np.ascontiguousarray(lower, dtype=np.float64)
    cdef int i, n = L.shape[0]
    cdef double acc = 0.0
    for i in range(n):
        acc += log(L[i, i])
    return 2.0 * acc


def quad_form_factor(lower, r):
    cdef cnp.ndarray[double, ndim=2] L = np.ascontiguousarray(lower, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] rhs = np.ascontiguousarray(r, dtype=np.float64)
    cdef int i, n = L.shape[0]
    cdef cnp.ndarray[double, ndim=1] y = np.empty(n, dtype=np.float64)
    _solve_lower(L, rhs, y, n)
    cdef double acc = 0.0
    for i in range(n):
        acc += y[i] * y[i]
    return acc


def gls_nll_grad(z, mu, sigma, w, kernels, double sigma_floor=0.0):
    """Batched GLS negative log-likelihood with analytic partials.

    Shapes: z/mu/sigma (B, D), w (B, M), kernels (M, D, D).  Returns
    (loss (B,), dmu (B, D), dsigma (B, D), dw (B, M)).
    """
    cdef const double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] muv = np.ascontiguousarray(mu, dtype=np.float64)
    cdef const double[:, ::1] sv = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef const double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, :, ::1] kv = np.ascontiguousarray(kernels, dtype=np.float64)
    cdef int B = zv.shape[0]
    cdef int D = zv.shape[1]
    cdef int M = kv.shape[0]

    loss_arr = np.empty(B, dtype=np.float64)
    dmu_arr = np.empty((B, D), dtype=np.float64)
    dsig_arr = np.empty((B, D), dtype=np.float64)
    dw_arr = np.empty((B, M), dtype=np.float64)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] dmu = dmu_arr
    cdef double[:, ::1] dsig = dsig_arr
    cdef double[:, ::1] dw = dw_arr

    cdef double[:, ::1] C = np.empty((D, D), dtype=np.float64)
    cdef double[:, ::1] L = np.empty((D, D), dtype=np.float64)
    cdef double[:, ::1] linv = np.empty((D, D), dtype=np.float64)
    cdef double[:, ::1] cinv = np.empty((D, D), dtype=np.float64)
    cdef double[::1] eps = np.empty(D, dtype=np.float64)
    cdef double[::1] sc = np.empty(D, dtype=np.float64)
    cdef double[::1] yvec = np.empty(D, dtype=np.float64)
    cdef double[::1] bvec = np.empty(D, dtype=np.float64)

    cdef int b, i, j, k, m, fail
    cdef double acc, logdet, quad, logsig, a1, a2

    for b in range(B):
        for i in range(D):
            sc[i] = sv[b, i]
            if sigma_floor > 0.0 and sc[i] < sigma_floor:
                sc[i] = sigma_floor
            eps[i] = (zv[b, i] - muv[b, i]) / sc[i]
        for i in range(D):
            for j in range(D):
                acc = 0.0
                for m in range(M):
                    acc += wv[b, m] * kv[m, i, j]
                C[i, j] = acc
        fail = _chol_ladder(C, L, D, 0.0)
        if fail != 0:
            raise NotPositiveDefinite(
                f"mixture {b} is not positive definite under the jitter ladder"
            )
        logdet = 0.0
        for i in range(D):
            logdet += log(L[i, i])
        logdet *= 2.0
        _solve_lower(L, eps, yvec, D)
        _solve_lower_t(L, yvec, bvec, D)
        _invert_lower(L, linv, D)
        # C^{-1} = L^{-T} L^{-1}
        for i in range(D):
            for j in range(i + 1):
                acc = 0.0
                for k in range(i, D):
                    acc += linv[k, i] * linv[k, j]
                cinv[i, j] = acc
                cinv[j, i] = acc

        quad = 0.0
        logsig = 0.0
        for i in range(D):
            quad += eps[i] * bvec[i]
            logsig += log(sc[i])
        loss[b] = 0.5 * logdet + logsig + 0.5 * quad + 0.5 * D * LOG_2PI_C

        for i in range(D):
            dmu[b, i] = -bvec[i] / sc[i]
            if sigma_floor > 0.0 and sv[b, i] < sigma_floor:
                dsig[b, i] = 0.0
            else:
                dsig[b, i] = (1.0 - bvec[i] * eps[i]) / sc[i]

        for m in range(M):
            a1 = 0.0
            a2 = 0.0
            for i in range(D):
                for j in range(D):
                    a1 += cinv[i, j] * kv[m, i, j]
                    a2 += bvec[i] * kv[m, i, j] * bvec[j]
            dw[b, m] = 0.5 * (a1 - a2)

    return loss_arr, dmu_arr, dsig_arr, dw_arr


def conditional_moments(corr, eps):
    """Conditional N(mean, var) of the last index given trailing residuals.

    ``corr`` is (B, D, D); ``eps`` is (B, k) with k <= D-1, ordered
    oldest-to-newest and aligned with rows D-1-k .. D-2 of each matrix.
    """
    cdef const double[:, :, ::1] cv = np.ascontiguousarray(corr, dtype=np.float64)
    cdef const double[:, ::1] ev = np.ascontiguousarray(eps, dtype=np.float64)
    cdef int B = cv.shape[0]
    cdef int D = cv.shape[1]
    cdef int k = ev.shape[1]

    mean_arr = np.zeros(B, dtype=np.float64)
    var_arr = np.ones(B, dtype=np.float64)
    if k == 0:
        return mean_arr, var_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr

    cdef int off = D - 1 - k
    cdef double[:, ::1] cobs = np.empty((k, k), dtype=np.float64)
    cdef double[:, ::1] L = np.empty((k, k), dtype=np.float64)
    cdef double[::1] cstar = np.empty(k, dtype=np.float64)
    cdef double[::1] y1 = np.empty(k, dtype=np.float64)
    cdef double[::1] y2 = np.empty(k, dtype=np.float64)

    cdef int b, i, j
    cdef double m, v

    for b in range(B):
        for i in range(k):
            for j in range(k):
                cobs[i, j] = cv[b, off + i, off + j]
            cstar[i] = cv[b, D - 1, off + i]
        if _chol_ladder(cobs, L, k, 0.0) != 0:
            raise NotPositiveDefinite(
                f"observed-block correlation {b} is not positive definite"
            )
        _solve_lower(L, ev[b], y1, k)
        _solve_lower(L, cstar, y2, k)
        m = 0.0
        v = 1.0
        for i in range(k):
            m += y2[i] * y1[i]
            v -= y2[i] * y2[i]
        if v < 0.0:
            v = 0.0
        elif v > 1.0:
            v = 1.0
        mean[b] = m
        var[b] = v

    return mean_arr, var_arr
