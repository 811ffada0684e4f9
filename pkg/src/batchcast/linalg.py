"""Dense symmetric positive-definite matrix primitives.

Thin typed layer over the kernel backend: Cholesky factorization with a
jitter escalation ladder, factor-based solves, log-determinants, and
quadratic forms.  All work is float64 and dense; matrices here are small
(correlation horizons of a few dozen), so no blocked or packed storage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import DimensionMismatch

__all__ = ["SymMatrix", "CholFactor", "cholesky", "chol_solve", "log_det", "quad_form"]


@dataclass(frozen=True)
class SymMatrix:
    """Dense symmetric matrix, row-major float64.

    Symmetry must be exact (bitwise), which holds for matrices assembled
    from symmetric construction rules; symmetrize explicitly before
    wrapping anything produced by non-symmetric arithmetic.
    """

    entries: np.ndarray

    def __post_init__(self):
        a = np.ascontiguousarray(self.entries, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
        if not np.array_equal(a, a.T):
            raise DimensionMismatch("matrix is not exactly symmetric")
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class CholFactor:
    """Lower-triangular Cholesky factor with strictly positive diagonal."""

    lower: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]


def cholesky(matrix: SymMatrix | np.ndarray, jitter: float = 0.0) -> CholFactor:
    """Factor ``S + jitter*I = L L^T``.

    On a failed pivot the jitter escalates through 1e-10, 1e-8, 1e-6
    before raising :class:`NotPositiveDefinite`; escalation accommodates
    mixtures that are positive definite in exact arithmetic but lose a few
    ulps at larger horizons.
    """
    a = matrix.entries if isinstance(matrix, SymMatrix) else SymMatrix(matrix).entries
    return CholFactor(backend.cholesky_factor(a, jitter))


def chol_solve(factor: CholFactor, b: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = b``."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (factor.dim,):
        raise DimensionMismatch(f"rhs has shape {b.shape}, factor dim {factor.dim}")
    return backend.solve_factor(factor.lower, b)


def log_det(factor: CholFactor) -> float:
    """log det of the factored matrix, ``2 * sum(log diag(L))``."""
    return backend.logdet_factor(factor.lower)


def quad_form(factor: CholFactor, r: np.ndarray) -> float:
    """``r^T (L L^T)^{-1} r`` computed as ``||L^{-1} r||^2`` (hence >= 0)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (factor.dim,):
        raise DimensionMismatch(f"vector has shape {r.shape}, factor dim {factor.dim}")
    return backend.quad_form_factor(factor.lower, r)
