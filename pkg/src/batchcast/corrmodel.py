"""Kernel-bank correlation model.

A fixed bank of squared-exponential Toeplitz kernel matrices (plus the
identity) is mixed by simplex weights into a valid correlation matrix for
the normalized errors inside a training mini-batch.  The same matrix
drives the conditional error distribution used to calibrate forecasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import InvalidLengthscale, InvalidSimplex, NonpositiveSigma, WeightDimensionMismatch
from .linalg import SymMatrix

__all__ = [
    "DEFAULT_LENGTHSCALES",
    "KernelBank",
    "MixWeights",
    "CorrelationMix",
    "ConditionalGaussian",
    "build_kernel_bank",
    "mix_correlation",
    "assemble_covariance",
    "conditional_error_dist",
]

# Three squared-exponential lengthscales plus the identity => M = 4.
DEFAULT_LENGTHSCALES = (1.0, 2.0, 3.0)

SIMPLEX_TOL = 1e-6


@dataclass(frozen=True)
class KernelBank:
    """Fixed stack of base correlation matrices for one horizon.

    ``kernels`` has shape (M, D, D): one squared-exponential kernel per
    lengthscale, in order, with the identity matrix as the final entry to
    carry the independent-noise component.
    """

    horizon: int
    lengthscales: tuple[float, ...]
    kernels: np.ndarray = field(repr=False)

    @property
    def n_components(self) -> int:
        return self.kernels.shape[0]


@dataclass(frozen=True)
class MixWeights:
    """Simplex weights over the kernel bank components."""

    w: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise InvalidSimplex(f"weights must be a nonempty vector, got shape {w.shape}")
        if np.any(w < 0.0):
            raise InvalidSimplex("weights must be nonnegative")
        total = float(w.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise InvalidSimplex(f"weights sum to {total}, expected 1")
        object.__setattr__(self, "w", w)

    def __len__(self) -> int:
        return self.w.size


@dataclass(frozen=True)
class CorrelationMix:
    """Mixed correlation matrix: symmetric, unit diagonal."""

    matrix: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise WeightDimensionMismatch(f"expected square matrix, got {c.shape}")
        if not np.array_equal(c, c.T):
            raise InvalidSimplex("correlation matrix is not exactly symmetric")
        if not np.all(np.diagonal(c) == 1.0):
            raise InvalidSimplex("correlation matrix diagonal must be exactly 1")
        object.__setattr__(self, "matrix", c)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ConditionalGaussian:
    """Conditional distribution of the next normalized error."""

    mean: float
    variance: float


def build_kernel_bank(
    horizon: int, lengthscales: tuple[float, ...] = DEFAULT_LENGTHSCALES
) -> KernelBank:
    """Build the (M, D, D) kernel stack for a horizon.

    Entry (i, j) of the kernel with lengthscale l is exp(-(i-j)^2 / l^2),
    so every kernel is Toeplitz with unit diagonal; the identity matrix is
    appended as the last component.
    """
    if horizon < 2:
        raise InvalidLengthscale(f"horizon must be >= 2, got {horizon}")
    scales = tuple(float(l) for l in lengthscales)
    if not scales:
        raise InvalidLengthscale("at least one lengthscale is required")
    if any(l <= 0.0 for l in scales):
        raise InvalidLengthscale(f"lengthscales must be > 0, got {scales}")

    lags = np.arange(horizon, dtype=np.float64)
    dist2 = (lags[:, None] - lags[None, :]) ** 2
    stack = np.empty((len(scales) + 1, horizon, horizon), dtype=np.float64)
    for m, l in enumerate(scales):
        stack[m] = np.exp(-dist2 / (l * l))
        np.fill_diagonal(stack[m], 1.0)
    stack[-1] = np.eye(horizon)
    stack.setflags(write=False)
    return KernelBank(horizon=horizon, lengthscales=scales, kernels=stack)


def mix_correlation(bank: KernelBank, weights: MixWeights | np.ndarray) -> CorrelationMix:
    """``C = sum_m w_m K_m`` with the diagonal pinned to exactly 1.

    For any simplex weight vector the result is symmetric positive
    definite with minimum eigenvalue at least the identity weight.
    """
    w = weights if isinstance(weights, MixWeights) else MixWeights(np.asarray(weights))
    if len(w) != bank.n_components:
        raise WeightDimensionMismatch(
            f"{len(w)} weights for a bank of {bank.n_components} components"
        )
    c = np.einsum("m,mij->ij", w.w, bank.kernels)
    # Kernels have exactly unit diagonals and the weights sum to 1; pinning
    # removes the last-ulp drift from the weighted sum.
    np.fill_diagonal(c, 1.0)
    return CorrelationMix(c)


def assemble_covariance(sigma: np.ndarray, corr: CorrelationMix) -> SymMatrix:
    """``Sigma = diag(sigma) C diag(sigma)``; diagonal equals sigma_i^2."""
    s = np.asarray(sigma, dtype=np.float64)
    if s.shape != (corr.dim,):
        raise WeightDimensionMismatch(
            f"sigma has shape {s.shape}, correlation dim {corr.dim}"
        )
    if np.any(s <= 0.0):
        raise NonpositiveSigma("all scales must be strictly positive")
    return SymMatrix(corr.matrix * np.outer(s, s))


def conditional_error_dist(corr: CorrelationMix, eps_obs: np.ndarray) -> ConditionalGaussian:
    """Condition the final index of ``corr`` on trailing observed residuals.

    ``eps_obs`` is ordered oldest-to-newest.  With k = len(eps_obs) (at
    most D-1, normally exactly D-1) the conditioning uses the trailing
    (k+1) x (k+1) sub-correlation, which is a valid marginal of the joint
    Gaussian.  Returns mean ``C_* C_obs^{-1} eps`` and variance
    ``1 - C_* C_obs^{-1} C_*^T`` (always in [0, 1]).
    """
    eps = np.asarray(eps_obs, dtype=np.float64)
    if eps.ndim != 1 or eps.size > corr.dim - 1:
        raise WeightDimensionMismatch(
            f"need at most {corr.dim - 1} residuals, got shape {eps.shape}"
        )
    mean, var = backend.conditional_moments(corr.matrix[None, :, :], eps[None, :])
    return ConditionalGaussian(mean=float(mean[0]), variance=float(var[0]))
