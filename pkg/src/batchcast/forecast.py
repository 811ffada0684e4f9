"""Multi-step rolling prediction with optional conditional calibration.

Uncalibrated (iid) sampling draws each step's normalized error from
N(0, 1).  Calibrated sampling conditions the error on the trailing
residual history through the step's mixed correlation matrix: the step
distribution tightens from N(mu, sigma^2) to N(mu + sigma*m, sigma^2*v)
with (m, v) the conditional moments, v <= 1.  Sampled errors re-enter the
buffer, so a trajectory stays coherent over the horizon.

Both modes consume an identical stream of standard normals, so pinning
the weight head to the identity makes calibrated trajectories bit-equal
to iid ones under a shared seed.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backend
from .corrmodel import KernelBank, MixWeights, conditional_error_dist, mix_correlation
from .data import ScalerTable, Series, TimeSeriesDataset, encode_covariates
from .errors import HistoryTooShort, InvalidConfig
from .net import HiddenState, Model

__all__ = [
    "QUANTILE_LEVELS",
    "ForecastConfig",
    "ResidualBuffer",
    "ForecastResult",
    "OneStepDiagnostics",
    "SeriesView",
    "teacher_forced_residuals",
    "calibrated_step",
    "rolling_forecast",
    "one_step_eval",
    "seasonal_naive_forecast",
    "evaluate_rolling",
    "worker_count",
]

QUANTILE_LEVELS = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass(frozen=True)
class ForecastConfig:
    pred_range: int = 12  # Q
    n_samples: int = 100
    mode: str = "calibrated"  # iid | calibrated
    seed: int = 0
    conditioning: str = "sliding"  # sliding | anchored residual window
    reset_buffer_per_sample: bool = True  # False: trajectories start from an empty buffer
    context: Optional[int] = None  # teacher-forcing steps; default P + max(P, D-1)

    def validate(self) -> None:
        if self.pred_range < 1 or self.n_samples < 1:
            raise InvalidConfig("pred_range and n_samples must be >= 1")
        if self.mode not in ("iid", "calibrated"):
            raise InvalidConfig(f"forecast mode must be iid or calibrated, got {self.mode!r}")
        if self.conditioning not in ("sliding", "anchored"):
            raise InvalidConfig("conditioning must be sliding or anchored")


class ResidualBuffer:
    """Ring of the most recent normalized residuals, oldest to newest."""

    def __init__(self, capacity: int, values=()):
        values = list(values)
        if len(values) > capacity:
            raise InvalidConfig(f"{len(values)} residuals exceed capacity {capacity}")
        self.capacity = capacity
        self._values = values

    def push(self, eps: float) -> None:
        self._values.append(float(eps))
        if len(self._values) > self.capacity:
            self._values.pop(0)

    def as_array(self) -> np.ndarray:
        return np.array(self._values, dtype=np.float64)

    def __len__(self) -> int:
        return len(self._values)


@dataclass(frozen=True)
class ForecastResult:
    """Sampled trajectories for one (series, start) in original units."""

    series_id: str
    start: int  # index of the first predicted time step
    samples: np.ndarray = field(repr=False)  # (n_samples, Q)
    quantile_levels: tuple[float, ...]
    quantiles: np.ndarray = field(repr=False)  # (len(levels), Q)
    cal_mean: float  # first-step predictive mean
    cal_var: float  # first-step predictive variance

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def pred_range(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class OneStepDiagnostics:
    """Teacher-forced one-step predictions over a span of one series."""

    series_id: str
    times: np.ndarray  # (n,) target indices
    mu: np.ndarray  # (n,) predictive mean, standardized units
    var: np.ndarray  # (n,) predictive variance, standardized units
    eps: np.ndarray  # (n,) residuals under the reported (mu, var)
    weights: np.ndarray  # (n, M) mixture weights at each step


@dataclass(frozen=True)
class SeriesView:
    """A standardized series bundled with its code and scaler."""

    series: Series
    code: int
    scaler: ScalerTable

    @property
    def series_id(self) -> str:
        return self.series.series_id


def _codes_at(series: Series, index: int):
    if index < len(series):
        hour = None if series.hour_codes is None else int(series.hour_codes[index])
        dow = None if series.dow_codes is None else int(series.dow_codes[index])
        return hour, dow
    return encode_covariates(series.timestamp_at(index), series.granularity)


def _teacher_forced(model: Model, view: SeriesView, start: int, n_steps: int):
    """Run the network over observed steps ending at target index start-1.

    Returns (mu, sigma, w, eps arrays over the processed steps, final
    hidden states (layers, 1, H)).
    """
    s = view.series
    first = start - n_steps
    if first < 1:
        raise HistoryTooShort(
            f"need {n_steps + 1} observed values before index {start}, have {start}"
        )
    idx = np.arange(first, start)
    lag = s.values[idx - 1][:, None]  # (S, 1)
    hour = None if s.hour_codes is None else s.hour_codes[idx][:, None]
    dow = None if s.dow_codes is None else s.dow_codes[idx][:, None]
    sid = np.array([view.code])
    head, _, hs = model.unroll_batch(lag, sid, hour, dow, head_steps="all")
    mu = head.mu[:, 0]
    sigma = head.sigma[:, 0]
    w = head.w[:, 0]
    eps = (s.values[idx] - mu) / sigma
    return mu, sigma, w, eps, hs


def _default_context(model: Model) -> int:
    p, d = model.config.context, model.config.horizon
    return p + max(p, d - 1)


def teacher_forced_residuals(
    model: Model, view: SeriesView, start: int, history_len: Optional[int] = None
):
    """Trailing D-1 observed residuals plus the state for step ``start``.

    Residuals are (z - mu)/sigma over the teacher-forced pass; the
    returned state is the one the forecaster advances from.
    """
    d = model.config.horizon
    need = max(model.config.context, d - 1) + 1
    if start < need:
        raise HistoryTooShort(f"history of {start} values < required {need}")
    n_steps = min(start - 1, history_len or _default_context(model))
    n_steps = max(n_steps, d - 1)
    _, _, _, eps, hs = _teacher_forced(model, view, start, n_steps)
    return ResidualBuffer(capacity=d - 1, values=eps[-(d - 1) :]), HiddenState(hs[:, 0, :])


def calibrated_step(mu: float, sigma: float, w: MixWeights, buf: ResidualBuffer, bank: KernelBank):
    """Calibrated step distribution (mu_bar, sigma_bar^2).

    mu_bar = mu + sigma*m and sigma_bar^2 = sigma^2*v with (m, v) the
    conditional moments of the next normalized error given the buffered
    residuals under the mixed correlation.
    """
    cond = conditional_error_dist(mix_correlation(bank, w), buf.as_array())
    return mu + sigma * cond.mean, sigma * sigma * cond.variance


def rolling_forecast(
    model: Model, view: SeriesView, start: int, cfg: ForecastConfig
) -> ForecastResult:
    """Sample n_samples trajectories of length Q from index ``start``.

    Every step feeds the sampled value back as the next lag input; in
    calibrated mode the sampled normalized error also enters the residual
    buffer.  Deterministic per (seed, series, start).
    """
    cfg.validate()
    s = view.series
    d = model.config.horizon
    bank = model.kernel_bank()
    calibrated = cfg.mode == "calibrated"

    buf0, state = teacher_forced_residuals(model, view, start, cfg.context)
    n, q_range = cfg.n_samples, cfg.pred_range

    hs = np.repeat(state.h[:, None, :], n, axis=1)
    buf = np.zeros((n, d - 1)) if d > 1 else np.zeros((n, 0))
    if cfg.reset_buffer_per_sample and d > 1:
        filled = len(buf0)
        buf[:, :filled] = buf0.as_array()[None, :]
    else:
        filled = 0

    rng = np.random.default_rng([cfg.seed, view.code, start])
    nu = rng.standard_normal((q_range, n))

    sid = np.full(n, view.code, dtype=np.intp)
    prev = np.full(n, s.values[start - 1])
    samples_std = np.empty((n, q_range))
    cal_mean_std = cal_var_std = None

    for q in range(q_range):
        t = start + q
        hour, dow = _codes_at(s, t)
        x0 = model.embed(
            prev,
            sid,
            None if hour is None else np.full(n, hour, dtype=np.intp),
            None if dow is None else np.full(n, dow, dtype=np.intp),
        )
        hs = model.step_state(hs, x0)
        head = model.heads(hs[-1], want_weights=calibrated)
        if calibrated and filled > 0:
            corr = np.einsum("nm,mij->nij", head.w, bank.kernels)
            m, v = backend.conditional_moments(corr, buf[:, :filled])
        else:
            m, v = np.zeros(n), np.ones(n)
        eps = m + np.sqrt(v) * nu[q]
        z = head.mu + head.sigma * eps
        samples_std[:, q] = z
        if q == 0:
            cal_mean_std = float(head.mu[0] + head.sigma[0] * m[0])
            cal_var_std = float(head.sigma[0] ** 2 * v[0])
        if calibrated and cfg.conditioning == "sliding" and d > 1:
            if filled < d - 1:
                buf[:, filled] = eps
                filled += 1
            else:
                buf[:, :-1] = buf[:, 1:]
                buf[:, -1] = eps
        prev = z

    scale = view.scaler.inverse_scale(s.series_id)
    samples = view.scaler.inverse_value(s.series_id, samples_std)
    quantiles = np.quantile(samples, QUANTILE_LEVELS, axis=0)
    return ForecastResult(
        series_id=s.series_id,
        start=start,
        samples=samples,
        quantile_levels=QUANTILE_LEVELS,
        quantiles=quantiles,
        cal_mean=float(view.scaler.inverse_value(s.series_id, cal_mean_std)),
        cal_var=cal_var_std * scale * scale,
    )


def one_step_eval(
    model: Model, view: SeriesView, lo: int, hi: int, calibrated: bool
) -> OneStepDiagnostics:
    """Teacher-forced one-step predictive distributions for targets
    [lo, hi); calibrated mode conditions each step on the trailing D-1
    observed residuals.  Standardized units throughout."""
    s = view.series
    d = model.config.horizon
    if hi > len(s) or lo >= hi:
        raise InvalidConfig(f"bad evaluation span [{lo}, {hi}) for length {len(s)}")
    warm = min(lo - 1, _default_context(model))
    n_eval = hi - lo
    mu, sigma, w, eps, _ = _teacher_forced(model, view, hi, warm + n_eval)
    k = d - 1
    mu_e, sig_e, w_e = mu[-n_eval:], sigma[-n_eval:], w[-n_eval:]
    if calibrated and k > 0:
        if warm < k:
            raise HistoryTooShort(f"need {k} warmup residuals, have {warm}")
        # trailing k residuals before each evaluated step
        base = warm - k + np.arange(n_eval)[:, None] + np.arange(k)[None, :]
        eps_prev = eps[base]
        corr = np.einsum("nm,mij->nij", w_e, model.kernel_bank().kernels)
        m, v = backend.conditional_moments(corr, eps_prev)
        mu_bar = mu_e + sig_e * m
        var_bar = sig_e**2 * v
    else:
        mu_bar = mu_e
        var_bar = sig_e**2
    times = np.arange(lo, hi)
    resid = (s.values[times] - mu_bar) / np.sqrt(var_bar)
    return OneStepDiagnostics(
        series_id=s.series_id, times=times, mu=mu_bar, var=var_bar, eps=resid, weights=w_e
    )


def seasonal_naive_forecast(
    view: SeriesView, start: int, pred_range: int, season: int
) -> ForecastResult:
    """Point forecast repeating the value one season earlier (observed
    values only: the lookback recurses by whole seasons past ``start``)."""
    s = view.series
    vals = np.empty(pred_range)
    for q in range(pred_range):
        t = start + q
        back = t - season
        while back >= start:
            back -= season
        if back < 0:
            raise HistoryTooShort(f"no observation one season before index {t}")
        vals[q] = s.values[back]
    samples = view.scaler.inverse_value(s.series_id, vals)[None, :]
    quantiles = np.repeat(samples, len(QUANTILE_LEVELS), axis=0)
    return ForecastResult(
        series_id=s.series_id,
        start=start,
        samples=samples,
        quantile_levels=QUANTILE_LEVELS,
        quantiles=quantiles,
        cal_mean=float(samples[0, 0]),
        cal_var=0.0,
    )


def worker_count() -> int:
    """Worker cap for embarrassingly parallel forecast jobs; the
    BATCHCAST_THREADS environment variable overrides."""
    env = os.environ.get("BATCHCAST_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InvalidConfig(f"BATCHCAST_THREADS must be an integer, got {env!r}") from None
        return max(1, n)
    return min(4, os.cpu_count() or 1)


def evaluate_rolling(
    model: Optional[Model],
    ds_std: TimeSeriesDataset,
    scaler: ScalerTable,
    n_starts: int,
    cfg: ForecastConfig,
    naive_season: Optional[int] = None,
) -> list[ForecastResult]:
    """Rolling forecasts from ``n_starts`` consecutive start timestamps at
    the head of each series' test split; jobs run on a small thread pool
    and are independent and deterministic, so results do not depend on the
    worker count."""
    if n_starts < 1:
        raise InvalidConfig(f"n_starts must be >= 1, got {n_starts}")
    views = [SeriesView(series=s, code=i, scaler=scaler) for i, s in enumerate(ds_std.series)]
    jobs = []
    for view in views:
        s = view.series
        if s.val_end is None:
            raise InvalidConfig(f"series {s.series_id!r} has no split marks")
        if s.val_end + n_starts - 1 + cfg.pred_range > len(s):
            raise InvalidConfig(
                f"series {s.series_id!r}: test span of {len(s) - s.val_end} cannot fit "
                f"{n_starts} rolling starts of range {cfg.pred_range}"
            )
        jobs.extend((view, s.val_end + i) for i in range(n_starts))

    def run(job):
        view, start = job
        if naive_season is not None:
            return seasonal_naive_forecast(view, start, cfg.pred_range, naive_season)
        return rolling_forecast(model, view, start, cfg)

    workers = worker_count()
    # per-job arrays are small; keep BLAS single-threaded under the pool
    with threadpool_limits(limits=1):
        if workers == 1 or len(jobs) == 1:
            return [run(j) for j in jobs]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, jobs))
