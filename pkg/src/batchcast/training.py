"""Optimizer and training protocol for both likelihood modes.

The gls mode trains the multivariate (correlated-error) likelihood over
mini-batches of D consecutive windows; the iid mode trains the product of
per-point Gaussian likelihoods over the same mini-batch layout, which
equals the gls loss with the correlation pinned to the identity.  One
optimizer batch mixes mini-batches from all series, sampled without
replacement and reshuffled per epoch from an epoch-derived seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import backend
from .data import ScalerTable, TimeSeriesDataset, standardize
from .errors import DivergedLoss, InvalidConfig, SeriesTooShort, ShapeMismatch
from .gradengine import compute_gradients
from .net import Model, ModelConfig

__all__ = [
    "TrainConfig",
    "OptState",
    "adam_step",
    "EarlyStopping",
    "EpochRecord",
    "TrainResult",
    "train",
    "write_history_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    """Protocol knobs; defaults follow the reference training recipe:
    batch size 64, at most 100 batches per epoch, Adam at lr 0.001, early
    stopping with patience 10, and up to 100 epochs."""

    mode: str = "gls"
    context: int = 12  # P
    horizon: int = 12  # D
    pred_range: int = 12  # Q
    batch_size: int = 64
    max_epochs: int = 100
    max_batches_per_epoch: int = 100
    lr: float = 0.001
    patience: int = 10
    seed: int = 0
    sigma_floor: float = 1e-4
    clip_norm: float = 10.0
    batch_reduction: str = "mean"  # reduce mini-batch losses within an optimizer batch

    def validate(self) -> None:
        if self.mode not in ("iid", "gls"):
            raise InvalidConfig(f"mode must be iid or gls, got {self.mode!r}")
        if self.mode == "gls" and self.horizon < 2:
            raise InvalidConfig("gls mode requires horizon D >= 2")
        if min(self.context, self.horizon, self.pred_range) < 1:
            raise InvalidConfig("P, D, Q must all be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1 or self.max_batches_per_epoch < 1:
            raise InvalidConfig("batch_size, max_epochs, max_batches_per_epoch must be >= 1")
        if self.lr <= 0:
            raise InvalidConfig("lr must be > 0")
        if self.patience < 1:
            raise InvalidConfig("patience must be >= 1")
        if self.batch_reduction not in ("mean", "sum"):
            raise InvalidConfig("batch_reduction must be mean or sum")


@dataclass
class OptState:
    """Adam first/second moment accumulators plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: OptState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    if set(params) != set(grads):
        raise ShapeMismatch("params and grads carry different names")
    t = opt.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {name!r} has shape {g.shape}, expected {p.shape}")
        m = beta1 * opt.m[name] + (1.0 - beta1) * g
        v = beta2 * opt.v[name] + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, OptState(m=new_m, v=new_v, step=t)


class EarlyStopping:
    """Strict-improvement tracker: stop after ``patience`` consecutive
    epochs without a new best validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True if it improved the best."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    clipped: int
    steps: int = 0  # optimizer steps this epoch; not part of history.csv


@dataclass
class TrainResult:
    model: Model
    scaler: ScalerTable
    history: list[EpochRecord]
    best_epoch: int
    best_val: float
    stopped_epoch: int
    train_config: TrainConfig = field(repr=False, default=None)


# ----------------------------------------------------------------------
# batch assembly over a concatenated multi-series view


class _TrainingView:
    """Concatenated per-series arrays for vectorized window gathering."""

    def __init__(self, ds: TimeSeriesDataset):
        self.values = np.concatenate([s.values for s in ds.series])
        gran_hour = ds.series[0].hour_codes is not None
        gran_dow = ds.series[0].dow_codes is not None
        self.hour = np.concatenate([s.hour_codes for s in ds.series]) if gran_hour else None
        self.dow = np.concatenate([s.dow_codes for s in ds.series]) if gran_dow else None
        self.offsets = np.cumsum([0] + [len(s) for s in ds.series[:-1]])

    def gather(self, pairs: np.ndarray, context: int, horizon: int):
        """pairs: (n, 2) of (series_code, alignment t).

        Returns sid (NW,), lag (P, NW), hour/dow (P, NW) or None, and
        z (n, horizon) final targets, where NW = n * horizon windows laid
        out mini-batch-major.
        """
        codes = pairs[:, 0]
        t_abs = self.offsets[codes] + pairs[:, 1]
        # target times of the D windows per pair: (n, D)
        taus = t_abs[:, None] + np.arange(-(horizon - 1), 1)[None, :]
        # step indices inside each window: (n, D, P)
        steps = taus[:, :, None] + np.arange(-(context - 1), 1)[None, None, :]
        flat = steps.reshape(-1, context)  # (NW, P)
        sid = np.repeat(codes, horizon)
        lag = self.values[flat - 1].T.copy()  # (P, NW)
        hour = self.hour[flat].T.copy() if self.hour is not None else None
        dow = self.dow[flat].T.copy() if self.dow is not None else None
        z = self.values[taus]
        return sid, lag, hour, dow, z


def _iid_rows(z, mu, sigma, floor):
    """Per-mini-batch iid NLL rows and elementwise partials."""
    sc = np.maximum(sigma, floor) if floor > 0.0 else sigma
    eps = (z - mu) / sc
    loss = np.sum(0.5 * eps * eps + np.log(sc) + 0.5 * backend.LOG_2PI, axis=1)
    dmu = -eps / sc
    dsigma = (1.0 - eps * eps) / sc
    if floor > 0.0:
        dsigma = np.where(sigma >= floor, dsigma, 0.0)
    return loss, dmu, dsigma


def _batch_loss_grads(model: Model, view: _TrainingView, pairs, cfg: TrainConfig):
    """Forward + backward over one optimizer batch; returns (loss, grads)."""
    D, P = cfg.horizon, cfg.context
    n = len(pairs)
    sid, lag, hour, dow, z = view.gather(pairs, P, D)
    want_w = cfg.mode == "gls"
    head, trace, _ = model.unroll_batch(lag, sid, hour, dow, cache=True, want_weights=want_w)
    mu = head.mu.reshape(n, D)
    sigma = head.sigma.reshape(n, D)
    if cfg.mode == "gls":
        w_last = head.w.reshape(n, D, -1)[:, -1, :]
        loss_rows, dmu, dsig, dw_rows = backend.gls_nll_grad(
            z, mu, sigma, w_last, model.kernel_bank().kernels, cfg.sigma_floor
        )
    else:
        loss_rows, dmu, dsig = _iid_rows(z, mu, sigma, cfg.sigma_floor)
        dw_rows = None
    scale = 1.0 / n if cfg.batch_reduction == "mean" else 1.0
    loss = float(loss_rows.sum() * scale)
    d_mu = (dmu * scale).ravel()
    d_sigma = (dsig * scale).ravel()
    d_w = None
    if dw_rows is not None:
        d_w = np.zeros((n * D, dw_rows.shape[1]))
        d_w[D - 1 :: D] = dw_rows * scale
    grads = compute_gradients(model, trace, d_mu, d_sigma, d_w)
    return loss, grads


def _mean_loss(model: Model, view: _TrainingView, pairs, cfg: TrainConfig, chunk: int = 256):
    """Mean mini-batch NLL (mode-consistent) over a list of pairs."""
    D, P = cfg.horizon, cfg.context
    total = 0.0
    for lo in range(0, len(pairs), chunk):
        part = pairs[lo : lo + chunk]
        sid, lag, hour, dow, z = view.gather(part, P, D)
        want_w = cfg.mode == "gls"
        head, _, _ = model.unroll_batch(lag, sid, hour, dow, want_weights=want_w)
        n = len(part)
        mu = head.mu.reshape(n, D)
        sigma = head.sigma.reshape(n, D)
        if cfg.mode == "gls":
            w_last = head.w.reshape(n, D, -1)[:, -1, :]
            rows, _, _, _ = backend.gls_nll_grad(
                z, mu, sigma, w_last, model.kernel_bank().kernels, cfg.sigma_floor
            )
        else:
            rows, _, _ = _iid_rows(z, mu, sigma, cfg.sigma_floor)
        total += float(rows.sum())
    return total / len(pairs)


def _clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> bool:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = np.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
        return True
    return False


def _pair_array(ds: TimeSeriesDataset, cfg: TrainConfig, split: str) -> np.ndarray:
    from .data import make_minibatches

    pairs = []
    for code, s in enumerate(ds.series):
        for mb in make_minibatches(s, cfg.context, cfg.horizon, series_code=code, split=split):
            pairs.append((code, mb.t))
    if not pairs:
        raise SeriesTooShort(f"no {split} mini-batches available")
    return np.array(pairs, dtype=np.intp)


def train(
    config: TrainConfig,
    ds: TimeSeriesDataset,
    model_config: Optional[ModelConfig] = None,
) -> TrainResult:
    """Standardize, train with early stopping, restore the best model.

    The dataset must carry split marks.  Validation loss is computed in
    the same mode the model trains under, so selection is internally
    consistent; the best-validation parameters are restored on exit.
    """
    config.validate()
    ds_std, scaler = standardize(ds)
    if model_config is None:
        first = ds_std.series[0]
        model_config = ModelConfig(
            n_series=ds_std.n_series,
            context=config.context,
            horizon=config.horizon,
            with_hour=first.hour_codes is not None,
            with_dow=first.dow_codes is not None,
        )
    if model_config.context != config.context or model_config.horizon != config.horizon:
        raise InvalidConfig("model context/horizon differ from the training config")
    if model_config.n_series != ds_std.n_series:
        raise InvalidConfig(
            f"model expects {model_config.n_series} series, dataset has {ds_std.n_series}"
        )

    view = _TrainingView(ds_std)
    train_pairs = _pair_array(ds_std, config, "train")
    val_pairs = _pair_array(ds_std, config, "val")

    # matrices here are far below BLAS multithreading break-even
    with threadpool_limits(limits=1):
        return _train_loop(config, model_config, view, train_pairs, val_pairs, scaler)


def _train_loop(config, model_config, view, train_pairs, val_pairs, scaler) -> TrainResult:
    model = Model.init(model_config, seed=config.seed)
    opt = OptState.for_params(model.params)
    stopper = EarlyStopping(config.patience)
    best_params = {k: v.copy() for k, v in model.params.items()}
    history: list[EpochRecord] = []

    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, 7919 + epoch])
        perm = rng.permutation(len(train_pairs))
        n_steps = min(
            config.max_batches_per_epoch,
            int(np.ceil(len(train_pairs) / config.batch_size)),
        )
        epoch_loss = 0.0
        clipped = 0
        for step in range(n_steps):
            batch = train_pairs[perm[step * config.batch_size : (step + 1) * config.batch_size]]
            loss, grads = _batch_loss_grads(model, view, batch, config)
            if not np.isfinite(loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch} step {step}")
            if _clip_gradients(grads, config.clip_norm):
                clipped += 1
            model.params, opt = adam_step(model.params, grads, opt, config.lr)
            epoch_loss += loss
        val_loss = _mean_loss(model, view, val_pairs, config)
        if not np.isfinite(val_loss):
            raise DivergedLoss(f"non-finite validation loss at epoch {epoch}")
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=epoch_loss / n_steps,
                val_loss=val_loss,
                lr=config.lr,
                clipped=clipped,
                steps=n_steps,
            )
        )
        if stopper.update(epoch, val_loss):
            best_params = {k: v.copy() for k, v in model.params.items()}
        if stopper.should_stop:
            break

    model.params = best_params
    final = model
    return TrainResult(
        model=final,
        scaler=scaler,
        history=history,
        best_epoch=stopper.best_epoch,
        best_val=float(stopper.best),
        stopped_epoch=history[-1].epoch if history else 0,
        train_config=config,
    )


def write_history_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "clipped"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.train_loss), repr(rec.val_loss), repr(rec.lr), rec.clipped])
