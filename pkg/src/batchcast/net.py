"""Autoregressive base forecaster.

Covariate embeddings feed a stack of gated recurrent cells; the top
hidden state drives three heads: a linear mean head, a softplus scale
head, and a small ELU network projecting to softmax mixture weights for
the correlation model.  Forward passes can record a trace of
intermediates for exact reverse-mode differentiation (see
``batchcast.gradengine``).

Parameters live in a flat name -> float64 array mapping; shapes are fixed
by :class:`ModelConfig` at construction and never change afterwards.  The
batched unroll is the training/forecasting hot path: layer-0 input
projections and head evaluations are hoisted out of the step loop, so the
recurrence itself touches only the state-dependent matmuls.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit as _sigmoid

from .corrmodel import DEFAULT_LENGTHSCALES, KernelBank, MixWeights, build_kernel_bank
from .errors import EmptyWindow, ShapeMismatch

__all__ = [
    "ModelConfig",
    "StepInput",
    "HiddenState",
    "GaussianStepParams",
    "Model",
    "softplus",
    "softmax",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = "batchcast-ckpt-v1"

N_HOURS = 24
N_DOW = 7


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and horizon hyperparameters baked into a checkpoint."""

    n_series: int
    context: int = 12  # conditioning range P
    horizon: int = 12  # correlation range D
    hidden: int = 40
    layers: int = 3
    lengthscales: tuple[float, ...] = DEFAULT_LENGTHSCALES
    with_hour: bool = True
    with_dow: bool = True
    emb_series: int = 8
    emb_hour: int = 4
    emb_dow: int = 3
    weight_hidden: int = 16

    @property
    def n_components(self) -> int:
        return len(self.lengthscales) + 1

    @property
    def input_dim(self) -> int:
        dim = self.emb_series + 1
        if self.with_hour:
            dim += self.emb_hour
        if self.with_dow:
            dim += self.emb_dow
        return dim

    def to_dict(self) -> dict:
        return {
            "n_series": self.n_series,
            "context": self.context,
            "horizon": self.horizon,
            "hidden": self.hidden,
            "layers": self.layers,
            "lengthscales": list(self.lengthscales),
            "with_hour": self.with_hour,
            "with_dow": self.with_dow,
            "emb_series": self.emb_series,
            "emb_hour": self.emb_hour,
            "emb_dow": self.emb_dow,
            "weight_hidden": self.weight_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["lengthscales"] = tuple(float(x) for x in d["lengthscales"])
        return cls(**d)


@dataclass(frozen=True)
class StepInput:
    """One time step of network input in standardized units."""

    lag_value: float
    series_id: int
    hour: Optional[int] = None
    dow: Optional[int] = None


@dataclass(frozen=True)
class HiddenState:
    """Per-layer hidden vectors, shape (layers, hidden)."""

    h: np.ndarray

    @property
    def layers(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class GaussianStepParams:
    """Distribution head output for one step: N(mu, sigma^2) plus weights."""

    mu: float
    sigma: float
    weights: MixWeights


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def softmax(v):
    """Shift-invariant softmax onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def _elu(x):
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


@dataclass
class HeadCache:
    """Head outputs plus the intermediates needed for their backward pass.

    Arrays are (B, ...) when evaluated at one step, (S, B, ...) when
    evaluated at every step of an unroll.
    """

    htop: np.ndarray
    mu: np.ndarray
    sraw: np.ndarray
    sigma: np.ndarray
    g1: Optional[np.ndarray]
    a1: Optional[np.ndarray]
    w: Optional[np.ndarray]


@dataclass
class Trace:
    """Recorded forward pass over a batch of windows (stacked buffers)."""

    sid: np.ndarray  # (B,)
    hour: Optional[np.ndarray]  # (S, B)
    dow: Optional[np.ndarray]  # (S, B)
    x0: np.ndarray  # (S, B, input_dim) embedded inputs
    hprev0: np.ndarray  # (L, B, H) states entering step 0
    h: np.ndarray  # (S, L, B, H) states after each step
    z: np.ndarray  # (S, L, B, H) update gates
    r: np.ndarray  # (S, L, B, H) reset gates
    c: np.ndarray  # (S, L, B, H) candidates
    head: Optional[HeadCache] = None  # final-step heads

    @property
    def n_steps(self) -> int:
        return self.x0.shape[0]

    @property
    def batch(self) -> int:
        return self.sid.shape[0]


class Model:
    """Recurrent forecaster with Gaussian and mixture-weight heads."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self._bank: Optional[KernelBank] = None

    # ------------------------------------------------------------------
    # construction

    @staticmethod
    def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {"emb_series": (config.n_series, config.emb_series)}
        if config.with_hour:
            shapes["emb_hour"] = (N_HOURS, config.emb_hour)
        if config.with_dow:
            shapes["emb_dow"] = (N_DOW, config.emb_dow)
        h = config.hidden
        dim = config.input_dim
        for layer in range(config.layers):
            shapes[f"gru{layer}_wx"] = (dim if layer == 0 else h, 3 * h)
            shapes[f"gru{layer}_wh"] = (h, 3 * h)
            shapes[f"gru{layer}_b"] = (3 * h,)
        shapes["mu_w"] = (h,)
        shapes["mu_b"] = (1,)
        shapes["sigma_w"] = (h,)
        shapes["sigma_b"] = (1,)
        shapes["wh_w1"] = (h, config.weight_hidden)
        shapes["wh_b1"] = (config.weight_hidden,)
        shapes["wh_w2"] = (config.weight_hidden, config.n_components)
        shapes["wh_b2"] = (config.n_components,)
        return shapes

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        """Seed-pinned initialization: uniform +-1/sqrt(fan_in), zero biases."""
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        for name, shape in cls.param_shapes(config).items():
            if name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2"):
                params[name] = np.zeros(shape, dtype=np.float64)
            else:
                bound = 1.0 / np.sqrt(shape[0])
                params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params)

    def kernel_bank(self) -> KernelBank:
        if self._bank is None:
            self._bank = build_kernel_bank(self.config.horizon, self.config.lengthscales)
        return self._bank

    def zero_state(self, batch: int = 1) -> np.ndarray:
        return np.zeros((self.config.layers, batch, self.config.hidden), dtype=np.float64)

    # ------------------------------------------------------------------
    # input embedding

    def _check_codes(self, sid, hour, dow) -> None:
        cfg = self.config
        sid = np.asarray(sid)
        if sid.min(initial=0) < 0 or sid.max(initial=0) >= cfg.n_series:
            raise ShapeMismatch(f"series_id out of range [0, {cfg.n_series})")
        if cfg.with_hour:
            if hour is None:
                raise ShapeMismatch("model expects an hour code")
            hour = np.asarray(hour)
            if hour.min(initial=0) < 0 or hour.max(initial=0) >= N_HOURS:
                raise ShapeMismatch("hour code out of range")
        if cfg.with_dow:
            if dow is None:
                raise ShapeMismatch("model expects a day-of-week code")
            dow = np.asarray(dow)
            if dow.min(initial=0) < 0 or dow.max(initial=0) >= N_DOW:
                raise ShapeMismatch("day-of-week code out of range")

    def embed(self, lag, sid, hour, dow) -> np.ndarray:
        """Embedded input rows (B, input_dim) for one step."""
        cfg = self.config
        self._check_codes(sid, hour, dow)
        parts = [self.params["emb_series"][sid]]
        if cfg.with_hour:
            parts.append(self.params["emb_hour"][hour])
        if cfg.with_dow:
            parts.append(self.params["emb_dow"][dow])
        parts.append(np.asarray(lag, dtype=np.float64)[:, None])
        return np.concatenate(parts, axis=1)

    def _embed_all(self, lag, sid, hour, dow) -> np.ndarray:
        """Embedded inputs (S, B, input_dim) for a whole unroll."""
        cfg = self.config
        self._check_codes(sid, hour, dow)
        S, B = lag.shape
        parts = [np.broadcast_to(self.params["emb_series"][sid], (S, B, cfg.emb_series))]
        if cfg.with_hour:
            parts.append(self.params["emb_hour"][hour])
        if cfg.with_dow:
            parts.append(self.params["emb_dow"][dow])
        parts.append(np.asarray(lag, dtype=np.float64)[:, :, None])
        return np.concatenate(parts, axis=2)

    # ------------------------------------------------------------------
    # cell and heads

    def step_state(self, hs: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """Advance all layers one step; hs (L, B, H), x0 (B, input_dim)."""
        cfg = self.config
        h = cfg.hidden
        new = np.empty_like(hs)
        x = x0
        for layer in range(cfg.layers):
            p = self.params
            proj = x @ p[f"gru{layer}_wx"] + p[f"gru{layer}_b"]
            hp = hs[layer]
            wh = p[f"gru{layer}_wh"]
            zr = _sigmoid(proj[:, : 2 * h] + hp @ wh[:, : 2 * h])
            z, r = zr[:, :h], zr[:, h:]
            c = np.tanh(proj[:, 2 * h :] + (r * hp) @ wh[:, 2 * h :])
            x = hp + z * (c - hp)
            new[layer] = x
        return new

    def heads(self, htop: np.ndarray, want_weights: bool = True) -> HeadCache:
        """Distribution and weight heads from top-layer states (..., H)."""
        p = self.params
        mu = htop @ p["mu_w"] + p["mu_b"][0]
        sraw = htop @ p["sigma_w"] + p["sigma_b"][0]
        sigma = softplus(sraw)
        if want_weights:
            g1 = htop @ p["wh_w1"] + p["wh_b1"]
            a1 = _elu(g1)
            w = softmax(a1 @ p["wh_w2"] + p["wh_b2"])
        else:
            g1 = a1 = w = None
        return HeadCache(htop=htop, mu=mu, sraw=sraw, sigma=sigma, g1=g1, a1=a1, w=w)

    # ------------------------------------------------------------------
    # batched unroll used by training, forecasting, and diagnostics

    def unroll_batch(
        self,
        lag: np.ndarray,
        sid: np.ndarray,
        hour: Optional[np.ndarray],
        dow: Optional[np.ndarray],
        init_state: Optional[np.ndarray] = None,
        cache: bool = False,
        want_weights: bool = True,
        head_steps: str = "last",
    ):
        """Unroll S steps over a batch of windows.

        lag: (S, B); sid: (B,); hour/dow: (S, B) or None.  head_steps
        "last" evaluates the heads at the final step (shape (B, ...));
        "all" evaluates them at every step (shape (S, B, ...)).  Returns
        (HeadCache, Trace or None, final states (L, B, H)).
        """
        cfg = self.config
        S, B = lag.shape
        H, L = cfg.hidden, cfg.layers
        x0 = self._embed_all(lag, sid, hour, dow)
        p = self.params
        # layer-0 input projection for every step in one matmul
        proj0 = (x0.reshape(S * B, -1) @ p["gru0_wx"]).reshape(S, B, 3 * H) + p["gru0_b"]

        hs = (self.zero_state(B) if init_state is None else init_state).copy()
        hprev0 = hs.copy()
        if cache:
            hbuf = np.empty((S, L, B, H))
            zbuf = np.empty((S, L, B, H))
            rbuf = np.empty((S, L, B, H))
            cbuf = np.empty((S, L, B, H))
        htop_all = np.empty((S, B, H)) if head_steps == "all" else None

        for s in range(S):
            x = None
            for layer in range(L):
                if layer == 0:
                    proj = proj0[s]
                else:
                    proj = x @ p[f"gru{layer}_wx"] + p[f"gru{layer}_b"]
                hp = hs[layer]
                wh = p[f"gru{layer}_wh"]
                zr = _sigmoid(proj[:, : 2 * H] + hp @ wh[:, : 2 * H])
                z, r = zr[:, :H], zr[:, H:]
                c = np.tanh(proj[:, 2 * H :] + (r * hp) @ wh[:, 2 * H :])
                x = hp + z * (c - hp)
                if cache:
                    zbuf[s, layer] = z
                    rbuf[s, layer] = r
                    cbuf[s, layer] = c
                    hbuf[s, layer] = x
                hs[layer] = x
            if head_steps == "all":
                htop_all[s] = hs[-1]

        if head_steps == "all":
            head = self.heads(htop_all, want_weights=want_weights)
        else:
            head = self.heads(hs[-1].copy(), want_weights=want_weights)
        trace = None
        if cache:
            trace = Trace(
                sid=sid, hour=hour, dow=dow, x0=x0, hprev0=hprev0,
                h=hbuf, z=zbuf, r=rbuf, c=cbuf, head=head,
            )
        return head, trace, hs

    # ------------------------------------------------------------------
    # public single-sequence operations

    def forward_step(self, state: HiddenState, step: StepInput):
        """One deterministic transition; returns (new state, step params)."""
        if state.h.shape != (self.config.layers, self.config.hidden):
            raise ShapeMismatch(
                f"state shape {state.h.shape} != ({self.config.layers}, {self.config.hidden})"
            )
        x0 = self.embed(
            np.array([step.lag_value]),
            np.array([step.series_id]),
            None if step.hour is None else np.array([step.hour]),
            None if step.dow is None else np.array([step.dow]),
        )
        new = self.step_state(state.h[:, None, :], x0)
        head = self.heads(new[-1])
        out = GaussianStepParams(
            mu=float(head.mu[0]), sigma=float(head.sigma[0]), weights=MixWeights(head.w[0])
        )
        return HiddenState(new[:, 0, :]), out

    def unroll_window(self, window: Sequence[StepInput], init_state: Optional[HiddenState] = None):
        """Teacher-forced unroll over a window of observed step inputs.

        Emits one :class:`GaussianStepParams` per step and a trace usable
        by ``gradengine.compute_gradients`` (loss partials attach to the
        final step).
        """
        if len(window) == 0:
            raise EmptyWindow("window must contain at least one step")
        cfg = self.config
        init = None if init_state is None else init_state.h[:, None, :]
        sid = np.array([window[0].series_id])
        lag = np.array([[s.lag_value] for s in window])
        hour = None if window[0].hour is None else np.array([[s.hour] for s in window])
        dow = None if window[0].dow is None else np.array([[s.dow] for s in window])
        head_all, trace, _ = self.unroll_batch(
            lag, sid, hour, dow, init_state=init, cache=True, head_steps="all"
        )
        outputs = [
            GaussianStepParams(
                mu=float(head_all.mu[s, 0]),
                sigma=float(head_all.sigma[s, 0]),
                weights=MixWeights(head_all.w[s, 0]),
            )
            for s in range(len(window))
        ]
        # re-anchor the trace's head cache to the final step for gradients
        trace.head = HeadCache(
            htop=head_all.htop[-1],
            mu=head_all.mu[-1],
            sraw=head_all.sraw[-1],
            sigma=head_all.sigma[-1],
            g1=head_all.g1[-1],
            a1=head_all.a1[-1],
            w=head_all.w[-1],
        )
        return outputs, trace


# ----------------------------------------------------------------------
# checkpoint format: single JSON document, floats at full precision


def save_checkpoint(path, model: Model, scaler_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    doc = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "scaler": scaler_state,
        "extra": extra or {},
        "params": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
            for name, arr in model.params.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    """Returns (model, scaler_state, extra)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ShapeMismatch(
            f"unsupported checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}"
        )
    config = ModelConfig.from_dict(doc["config"])
    expected = Model.param_shapes(config)
    params = {}
    for name, shape in expected.items():
        if name not in doc["params"]:
            raise ShapeMismatch(f"checkpoint is missing parameter {name!r}")
        entry = doc["params"][name]
        if tuple(entry["shape"]) != shape:
            raise ShapeMismatch(
                f"parameter {name!r} has shape {tuple(entry['shape'])}, expected {shape}"
            )
        params[name] = np.array(entry["data"], dtype=np.float64).reshape(shape)
    return Model(config, params), doc.get("scaler"), doc.get("extra", {})
