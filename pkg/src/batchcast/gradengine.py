"""Exact reverse-mode gradients for the composite training loss.

The Gaussian-likelihood side is handled analytically (closed-form partials
of the GLS and i.i.d. negative log-likelihoods, see the backend kernels);
this module chains those partials through the recorded forward trace of
the network: heads, gated recurrent layers (backprop through time), and
embedding tables.  No general autodiff: every rule here is the hand
derivative of the corresponding forward line in ``batchcast.net``.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from scipy.special import expit as _sigmoid

from . import backend
from .corrmodel import KernelBank, MixWeights
from .errors import NonpositiveSigma, ShapeMismatch
from .net import Model, Trace

__all__ = [
    "backprop_iid",
    "backprop_gls",
    "zero_gradients",
    "compute_gradients",
]

LOG_2PI = backend.LOG_2PI


def backprop_iid(mu: float, sigma: float, z: float):
    """Per-point Gaussian NLL and its partials.

    loss = 0.5*eps^2 + ln(sigma) + 0.5*ln(2*pi) with eps = (z - mu)/sigma;
    dmu = -eps/sigma, dsigma = (1 - eps^2)/sigma.
    """
    if sigma <= 0.0:
        raise NonpositiveSigma(f"sigma must be > 0, got {sigma}")
    eps = (z - mu) / sigma
    loss = 0.5 * eps * eps + np.log(sigma) + 0.5 * LOG_2PI
    return float(loss), float(-eps / sigma), float((1.0 - eps * eps) / sigma)


def backprop_gls(mu, sigma, w, z, bank: KernelBank, sigma_floor: float = 0.0):
    """GLS NLL over one mini-batch of D targets, with analytic partials.

    loss = 0.5*log det(Sigma) + 0.5*r^T Sigma^{-1} r + (D/2)*log(2*pi)
    with r = z - mu and Sigma = diag(sigma) C(w) diag(sigma).  The partials
    are the exact matrix-calculus derivatives chained to sigma through the
    congruence structure and to w through the kernel stack.
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    wv = w.w if isinstance(w, MixWeights) else np.asarray(w, dtype=np.float64)
    if mu.shape != z.shape or sigma.shape != z.shape:
        raise ShapeMismatch("mu, sigma, z must share one shape")
    if np.any(sigma <= 0.0):
        raise NonpositiveSigma("all sigma entries must be > 0")
    if wv.shape != (bank.n_components,):
        raise ShapeMismatch(f"{wv.shape[0]} weights for {bank.n_components} kernels")
    loss, dmu, dsigma, dw = backend.gls_nll_grad(
        z[None, :], mu[None, :], sigma[None, :], wv[None, :], bank.kernels, sigma_floor
    )
    return float(loss[0]), dmu[0], dsigma[0], dw[0]


def zero_gradients(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.items()}


def compute_gradients(
    model: Model,
    trace: Trace,
    d_mu: np.ndarray,
    d_sigma: np.ndarray,
    d_w: Optional[np.ndarray] = None,
    grads: Optional[dict[str, np.ndarray]] = None,
) -> dict[str, np.ndarray]:
    """Reverse sweep through a recorded forward trace.

    ``d_mu``/``d_sigma`` are (B,) partials of the scalar loss w.r.t. the
    final-step head outputs of each window in the batch; ``d_w`` is the
    optional (B, M) partial w.r.t. the final-step mixture weights.
    Gradients accumulate into ``grads`` (created zeroed if not given), so
    calls over several traces sum associatively.
    """
    cfg = model.config
    p = model.params
    head = trace.head
    if head is None or trace.n_steps == 0:
        raise ShapeMismatch("trace has no recorded steps or head outputs")
    B = trace.batch
    d_mu = np.asarray(d_mu, dtype=np.float64)
    d_sigma = np.asarray(d_sigma, dtype=np.float64)
    if d_mu.shape != (B,) or d_sigma.shape != (B,):
        raise ShapeMismatch(f"loss partials must have shape ({B},)")
    if grads is None:
        grads = zero_gradients(p)

    htop = head.htop
    dh_top = d_mu[:, None] * p["mu_w"][None, :]
    grads["mu_w"] += htop.T @ d_mu
    grads["mu_b"][0] += d_mu.sum()

    dsraw = d_sigma * _sigmoid(head.sraw)
    dh_top += dsraw[:, None] * p["sigma_w"][None, :]
    grads["sigma_w"] += htop.T @ dsraw
    grads["sigma_b"][0] += dsraw.sum()

    if d_w is not None:
        d_w = np.asarray(d_w, dtype=np.float64)
        if d_w.shape != (B, cfg.n_components):
            raise ShapeMismatch(f"d_w must have shape ({B}, {cfg.n_components})")
        w = head.w
        dlogits = w * (d_w - np.sum(d_w * w, axis=1, keepdims=True))
        grads["wh_w2"] += head.a1.T @ dlogits
        grads["wh_b2"] += dlogits.sum(axis=0)
        da1 = dlogits @ p["wh_w2"].T
        dg1 = da1 * np.where(head.g1 > 0.0, 1.0, head.a1 + 1.0)
        grads["wh_w1"] += htop.T @ dg1
        grads["wh_b1"] += dg1.sum(axis=0)
        dh_top += dg1 @ p["wh_w1"].T

    # backprop through time: dh[l] carries the state gradient flowing into
    # the output of layer l at the current step
    S = trace.n_steps
    H, L = cfg.hidden, cfg.layers
    dh = np.zeros((L, B, H))
    dh[-1] = dh_top
    dpre0 = np.empty((S, B, 3 * H))  # layer-0 pre-activation grads, consumed in bulk
    for s in range(S - 1, -1, -1):
        for layer in range(L - 1, -1, -1):
            hp = trace.h[s - 1, layer] if s > 0 else trace.hprev0[layer]
            z = trace.z[s, layer]
            r = trace.r[s, layer]
            c = trace.c[s, layer]
            dhn = dh[layer]

            dz = dhn * (c - hp)
            dc = dhn * z
            dhp = dhn * (1.0 - z)

            dc_pre = dc * (1.0 - c * c)
            wh = p[f"gru{layer}_wh"]
            drh = dc_pre @ wh[:, 2 * H :].T
            dr = drh * hp
            dhp += drh * r

            dz_pre = dz * z * (1.0 - z)
            dr_pre = dr * r * (1.0 - r)
            dpre = np.concatenate([dz_pre, dr_pre, dc_pre], axis=1)

            gwh = grads[f"gru{layer}_wh"]
            gwh[:, : 2 * H] += hp.T @ dpre[:, : 2 * H]
            gwh[:, 2 * H :] += (r * hp).T @ dc_pre
            dhp += dpre[:, : 2 * H] @ wh[:, : 2 * H].T

            if layer == 0:
                dpre0[s] = dpre
            else:
                x = trace.h[s, layer - 1]
                grads[f"gru{layer}_wx"] += x.T @ dpre
                grads[f"gru{layer}_b"] += dpre.sum(axis=0)
                dh[layer - 1] += dpre @ p[f"gru{layer}_wx"].T
            dh[layer] = dhp

    # input-side gradients for layer 0, batched over all steps
    flat_x = trace.x0.reshape(S * B, -1)
    flat_dp = dpre0.reshape(S * B, 3 * H)
    grads["gru0_wx"] += flat_x.T @ flat_dp
    grads["gru0_b"] += flat_dp.sum(axis=0)
    dx0 = (flat_dp @ p["gru0_wx"].T).reshape(S, B, -1)
    _embedding_backward(model, trace, dx0, grads)
    return grads


def _embedding_backward(model: Model, trace: Trace, dx0: np.ndarray, grads):
    cfg = model.config
    S, B = dx0.shape[:2]
    off = 0
    # series id is constant across the unroll: reduce over steps first
    np.add.at(grads["emb_series"], trace.sid, dx0[:, :, off : off + cfg.emb_series].sum(axis=0))
    off += cfg.emb_series
    if cfg.with_hour:
        np.add.at(
            grads["emb_hour"],
            np.asarray(trace.hour).ravel(),
            dx0[:, :, off : off + cfg.emb_hour].reshape(S * B, -1),
        )
        off += cfg.emb_hour
    if cfg.with_dow:
        np.add.at(
            grads["emb_dow"],
            np.asarray(trace.dow).ravel(),
            dx0[:, :, off : off + cfg.emb_dow].reshape(S * B, -1),
        )
    # final column is the lag value: data, not a parameter
