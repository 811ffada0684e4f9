"""Pure-numpy implementations of the hot numerical kernels.

Mirrors the compiled extension ``batchcast.backend._gls`` function for
function.  Batched operations vectorize over the leading axis with stacked
numpy linalg calls; the compiled core fuses the same math in C loops.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import NotPositiveDefinite

# Escalation ladder tried after the caller-requested jitter fails.
JITTER_LADDER = (1e-10, 1e-8, 1e-6)

LOG_2PI = float(np.log(2.0 * np.pi))


def _attempts(jitter: float) -> list[float]:
    return [jitter] + [j for j in JITTER_LADDER if j > jitter]


def cholesky_factor(matrix: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of ``matrix + jitter*I`` with jitter escalation."""
    a = np.asarray(matrix, dtype=np.float64)
    n = a.shape[0]
    for j in _attempts(jitter):
        try:
            return np.linalg.cholesky(a + j * np.eye(n) if j else a)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveDefinite(
        f"matrix of dim {n} has a non-positive pivot even with jitter {JITTER_LADDER[-1]}"
    )


def solve_factor(lower: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve (L L^T) x = b given the lower factor."""
    y = solve_triangular(lower, b, lower=True)
    return solve_triangular(lower, y, lower=True, trans="T")


def logdet_factor(lower: np.ndarray) -> float:
    return float(2.0 * np.sum(np.log(np.diagonal(lower))))


def quad_form_factor(lower: np.ndarray, r: np.ndarray) -> float:
    y = solve_triangular(lower, r, lower=True)
    return float(y @ y)


def _chol_batch(c: np.ndarray) -> np.ndarray:
    """Batched Cholesky.  On failure, escalates jitter per row and adds the
    applied jitter into ``c`` in place so downstream math stays consistent."""
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        pass
    n = c.shape[1]
    out = np.empty_like(c)
    for i in range(c.shape[0]):
        for j in _attempts(0.0):
            try:
                out[i] = np.linalg.cholesky(c[i] + j * np.eye(n) if j else c[i])
                if j:
                    c[i] += j * np.eye(n)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise NotPositiveDefinite(
                f"mixture {i} is not positive definite under the jitter ladder"
            )
    return out


def gls_nll_grad(
    z: np.ndarray,
    mu: np.ndarray,
    sigma: np.ndarray,
    w: np.ndarray,
    kernels: np.ndarray,
    sigma_floor: float = 0.0,
):
    """Batched GLS negative log-likelihood with analytic partials.

    Parameters
    ----------
    z, mu, sigma : (B, D) arrays
    w : (B, M) mixture weights
    kernels : (M, D, D) kernel bank stack
    sigma_floor : scale clamp applied inside the likelihood

    Returns
    -------
    loss : (B,) per-mini-batch negative log-likelihood
    dmu, dsigma : (B, D) partials
    dw : (B, M) partials
    """
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, D = z.shape

    sc = np.maximum(sigma, sigma_floor) if sigma_floor > 0.0 else sigma
    eps = (z - mu) / sc

    corr = np.einsum("bm,mij->bij", w, kernels)
    lower = _chol_batch(corr)
    logdet = 2.0 * np.sum(np.log(np.diagonal(lower, axis1=1, axis2=2)), axis=1)

    cinv = np.linalg.inv(corr)
    cinv = 0.5 * (cinv + np.swapaxes(cinv, 1, 2))
    bvec = np.einsum("bij,bj->bi", cinv, eps)
    quad = np.einsum("bi,bi->b", eps, bvec)

    loss = 0.5 * logdet + np.sum(np.log(sc), axis=1) + 0.5 * quad + 0.5 * D * LOG_2PI

    dmu = -bvec / sc
    dsigma = (1.0 - bvec * eps) / sc
    if sigma_floor > 0.0:
        dsigma = np.where(sigma >= sigma_floor, dsigma, 0.0)

    kb = np.einsum("mij,bj->bmi", kernels, bvec)
    dw = 0.5 * (
        np.einsum("bij,mij->bm", cinv, kernels) - np.einsum("bmi,bi->bm", kb, bvec)
    )
    return loss, dmu, dsigma, dw


def conditional_moments(corr: np.ndarray, eps: np.ndarray):
    """Conditional N(mean, var) of the last index given trailing residuals.

    ``corr`` is (B, D, D); ``eps`` is (B, k) with k <= D-1, ordered
    oldest-to-newest and aligned with rows D-1-k .. D-2 of each matrix.
    """
    corr = np.asarray(corr, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    B, D, _ = corr.shape
    k = eps.shape[1]
    if k == 0:
        return np.zeros(B), np.ones(B)

    sub = corr[:, D - 1 - k :, D - 1 - k :]
    cobs = sub[:, :k, :k]
    cstar = sub[:, k, :k]

    rhs = np.concatenate([eps[:, :, None], cstar[:, :, None]], axis=2)
    try:
        sol = np.linalg.solve(cobs, rhs)
    except np.linalg.LinAlgError:
        sol = np.empty_like(rhs)
        for i in range(B):
            low = cholesky_factor(cobs[i])
            sol[i, :, 0] = solve_factor(low, rhs[i, :, 0])
            sol[i, :, 1] = solve_factor(low, rhs[i, :, 1])
    mean = np.einsum("bk,bk->b", cstar, sol[:, :, 0])
    var = 1.0 - np.einsum("bk,bk->b", cstar, sol[:, :, 1])
    return mean, np.clip(var, 0.0, 1.0)
