"""Dataset ingestion, covariate encoding, splits, and mini-batch layout.

Series are univariate, uniformly spaced, and identified by string ids.
Timestamps are either integer epoch steps (step 0 is a nominal Monday
00:00) or RFC 3339 strings; each series stores its start timestamp and
granularity, and all later timestamps are implied by position.

A training instance is a mini-batch: D consecutive windows from one
series, each window a segment of P+1 raw values yielding P teacher-forced
(input, target) steps; the D final-step targets are the jointly modeled
vector.  With stride 1 a training split of length T yields T-(P+D)+1
mini-batches.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Optional, Union

import numpy as np

from .errors import (
    DuplicateTimestamp,
    EmptyTrainSplit,
    InvalidConfig,
    InvalidPhi,
    NonUniformSpacing,
    ParseError,
    SeriesTooShort,
)
from .net import StepInput

__all__ = [
    "GRANULARITIES",
    "SEASON_LENGTH",
    "Timestamp",
    "Series",
    "TimeSeriesDataset",
    "ScalerTable",
    "Window",
    "MiniBatch",
    "encode_covariates",
    "advance_timestamp",
    "apply_scaler",
    "load_dataset",
    "write_long_csv",
    "chronological_split",
    "standardize",
    "make_minibatches",
    "SynthConfig",
    "synth_ar",
]

GRANULARITIES = ("hourly", "daily", "5min", "quarterly", "workday")

# One seasonal cycle, in steps, per granularity (used by the naive baseline).
SEASON_LENGTH = {"hourly": 24, "daily": 7, "5min": 288, "quarterly": 4, "workday": 5}

# Which covariate codes exist per granularity.
_HAS_HOUR = {"hourly": True, "5min": True, "daily": False, "quarterly": False, "workday": False}
_HAS_DOW = {"hourly": True, "5min": True, "daily": True, "quarterly": False, "workday": True}

Timestamp = Union[int, datetime]


def apply_scaler(ds: "TimeSeriesDataset", scaler: "ScalerTable") -> "TimeSeriesDataset":
    """Transform a dataset with an existing scaler (e.g. from a checkpoint)."""
    out = []
    for s in ds.series:
        if s.series_id not in scaler.means:
            raise InvalidConfig(f"scaler has no entry for series {s.series_id!r}")
        out.append(
            replace(
                s,
                values=(s.values - scaler.means[s.series_id]) / scaler.stds[s.series_id],
            )
        )
    return TimeSeriesDataset(series=tuple(out))


def advance_timestamp(ts: Timestamp, granularity: str) -> Timestamp:
    """The expected successor timestamp under uniform spacing."""
    if isinstance(ts, int):
        return ts + 1
    if granularity == "hourly":
        return ts + timedelta(hours=1)
    if granularity == "5min":
        return ts + timedelta(minutes=5)
    if granularity == "daily":
        return ts + timedelta(days=1)
    if granularity == "workday":
        nxt = ts + timedelta(days=1)
        while nxt.weekday() >= 5:
            nxt += timedelta(days=1)
        return nxt
    if granularity == "quarterly":
        month = ts.month + 3
        year = ts.year + (month - 1) // 12
        month = (month - 1) % 12 + 1
        return ts.replace(year=year, month=month)
    raise InvalidConfig(f"unknown granularity {granularity!r}")


def encode_covariates(ts: Timestamp, granularity: str) -> tuple[Optional[int], Optional[int]]:
    """(hour, dow) codes for a timestamp; a code is None when the
    granularity does not carry it.  Monday is day 0.  Integer timestamps
    anchor step 0 at Monday 00:00."""
    if granularity not in GRANULARITIES:
        raise InvalidConfig(f"unknown granularity {granularity!r}")
    if isinstance(ts, int):
        if granularity == "hourly":
            hour, dow = ts % 24, (ts // 24) % 7
        elif granularity == "5min":
            hour, dow = (ts // 12) % 24, (ts // 288) % 7
        elif granularity == "daily":
            hour, dow = None, ts % 7
        elif granularity == "workday":
            hour, dow = None, ts % 5
        else:
            hour = dow = None
    else:
        hour = ts.hour if _HAS_HOUR[granularity] else None
        dow = ts.weekday() if _HAS_DOW[granularity] else None
    if not _HAS_HOUR[granularity]:
        hour = None
    if not _HAS_DOW[granularity]:
        dow = None
    return hour, dow


@dataclass(frozen=True)
class Series:
    """One univariate series with implied uniform timestamps."""

    series_id: str
    start: Timestamp
    granularity: str
    values: np.ndarray
    train_end: Optional[int] = None
    val_end: Optional[int] = None
    hour_codes: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    dow_codes: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ParseError(f"series {self.series_id!r} contains non-finite values")
        object.__setattr__(self, "values", v)
        if self.hour_codes is None:
            hours, dows = self._compute_codes()
            object.__setattr__(self, "hour_codes", hours)
            object.__setattr__(self, "dow_codes", dows)

    def _compute_codes(self):
        n = len(self.values)
        if not _HAS_HOUR[self.granularity] and not _HAS_DOW[self.granularity]:
            return None, None
        hours = np.zeros(n, dtype=np.intp) if _HAS_HOUR[self.granularity] else None
        dows = np.zeros(n, dtype=np.intp) if _HAS_DOW[self.granularity] else None
        if isinstance(self.start, int):
            idx = self.start + np.arange(n)
            if self.granularity == "hourly":
                if hours is not None:
                    hours[:] = idx % 24
                dows[:] = (idx // 24) % 7
            elif self.granularity == "5min":
                hours[:] = (idx // 12) % 24
                dows[:] = (idx // 288) % 7
            elif self.granularity == "daily":
                dows[:] = idx % 7
            elif self.granularity == "workday":
                dows[:] = idx % 5
        else:
            ts = self.start
            for i in range(n):
                h, d = encode_covariates(ts, self.granularity)
                if hours is not None:
                    hours[i] = h
                if dows is not None:
                    dows[i] = d
                ts = advance_timestamp(ts, self.granularity)
        return hours, dows

    def __len__(self) -> int:
        return len(self.values)

    def timestamp_at(self, index: int) -> Timestamp:
        ts = self.start
        if isinstance(ts, int):
            return ts + index
        for _ in range(index):
            ts = advance_timestamp(ts, self.granularity)
        return ts


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Collection of series sharing a granularity, with split marks."""

    series: tuple[Series, ...]

    def __post_init__(self):
        if not self.series:
            raise ParseError("dataset contains no series")
        grans = {s.granularity for s in self.series}
        if len(grans) != 1:
            raise ParseError(f"series mix granularities: {sorted(grans)}")
        ids = [s.series_id for s in self.series]
        if len(set(ids)) != len(ids):
            raise DuplicateTimestamp("duplicate series ids in dataset")

    @property
    def granularity(self) -> str:
        return self.series[0].granularity

    @property
    def n_series(self) -> int:
        return len(self.series)

    @property
    def ids(self) -> list[str]:
        return [s.series_id for s in self.series]

    def code_of(self, series_id: str) -> int:
        return self.ids.index(series_id)


class ScalerTable:
    """Per-series mean/std computed on the training split only."""

    def __init__(self, means: dict[str, float], stds: dict[str, float]):
        self.means = means
        self.stds = stds

    def transform_value(self, series_id: str, v):
        return (np.asarray(v) - self.means[series_id]) / self.stds[series_id]

    def inverse_value(self, series_id: str, v):
        return np.asarray(v) * self.stds[series_id] + self.means[series_id]

    def inverse_scale(self, series_id: str) -> float:
        return self.stds[series_id]

    def to_state(self) -> dict:
        return {"means": self.means, "stds": self.stds}

    @classmethod
    def from_state(cls, state: dict) -> "ScalerTable":
        return cls(
            {k: float(v) for k, v in state["means"].items()},
            {k: float(v) for k, v in state["stds"].items()},
        )


# ----------------------------------------------------------------------
# loading and writing


def _parse_timestamp(token: str, lineno: int) -> Timestamp:
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(token.replace("Z", "+00:00"))
    except ValueError:
        raise ParseError(f"line {lineno}: bad timestamp {token!r}") from None


def _parse_value(token: str, lineno: int) -> float:
    token = token.strip()
    if not token:
        raise ParseError(f"line {lineno}: missing value cell")
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"line {lineno}: bad value {token!r}") from None


def _series_from_rows(series_id, rows, granularity) -> Series:
    """rows: list of (timestamp, value, lineno); sorted canonically here."""
    kinds = {type(r[0]) for r in rows}
    if len(kinds) > 1:
        raise ParseError(
            f"series {series_id!r} mixes integer and RFC 3339 timestamps"
        )
    rows = sorted(rows, key=lambda r: r[0])
    for (t0, _, l0), (t1, _, l1) in zip(rows, rows[1:]):
        if t1 == t0:
            raise DuplicateTimestamp(
                f"series {series_id!r}: timestamp {t0} repeated (line {l1})"
            )
        if t1 != advance_timestamp(t0, granularity):
            raise NonUniformSpacing(
                f"series {series_id!r}: expected "
                f"{advance_timestamp(t0, granularity)} after {t0}, got {t1} (line {l1})"
            )
    values = np.array([v for _, v, _ in rows], dtype=np.float64)
    return Series(series_id=series_id, start=rows[0][0], granularity=granularity, values=values)


def load_dataset(path, fmt: str = "long-csv", granularity: str = "hourly") -> TimeSeriesDataset:
    """Read a long or wide CSV into a dataset.

    long-csv header: series_id,timestamp,value.  wide-csv header:
    timestamp,<id1>,<id2>,...  Rows may arrive out of order; they are
    sorted per series and then checked for duplicates and uniform spacing.
    """
    if granularity not in GRANULARITIES:
        raise InvalidConfig(f"unknown granularity {granularity!r}")
    if fmt not in ("long-csv", "wide-csv"):
        raise InvalidConfig(f"unknown dataset format {fmt!r}")
    by_series: dict[str, list] = {}
    order: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("line 1: empty file, header row required") from None
        if fmt == "long-csv":
            if [h.strip() for h in header[:3]] != ["series_id", "timestamp", "value"]:
                raise ParseError("line 1: expected header series_id,timestamp,value")
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) < 3:
                    raise ParseError(f"line {lineno}: expected 3 columns, got {len(row)}")
                sid = row[0].strip()
                if not sid:
                    raise ParseError(f"line {lineno}: empty series_id")
                ts = _parse_timestamp(row[1], lineno)
                val = _parse_value(row[2], lineno)
                if sid not in by_series:
                    by_series[sid] = []
                    order.append(sid)
                by_series[sid].append((ts, val, lineno))
        else:
            if not header or header[0].strip() != "timestamp" or len(header) < 2:
                raise ParseError("line 1: expected header timestamp,<id>,...")
            order = [h.strip() for h in header[1:]]
            by_series = {sid: [] for sid in order}
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) != len(header):
                    raise ParseError(
                        f"line {lineno}: expected {len(header)} columns, got {len(row)}"
                    )
                ts = _parse_timestamp(row[0], lineno)
                for sid, token in zip(order, row[1:]):
                    by_series[sid].append((ts, _parse_value(token, lineno), lineno))
    if not order:
        raise ParseError("no data rows found")
    series = tuple(_series_from_rows(sid, by_series[sid], granularity) for sid in order)
    return TimeSeriesDataset(series=series)


def write_long_csv(ds: TimeSeriesDataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["series_id", "timestamp", "value"])
        for s in ds.series:
            ts = s.start
            for v in s.values:
                token = ts if isinstance(ts, int) else ts.isoformat()
                writer.writerow([s.series_id, token, repr(float(v))])
                ts = advance_timestamp(ts, s.granularity)


# ----------------------------------------------------------------------
# splits and standardization


def chronological_split(ds: TimeSeriesDataset, test_span: int) -> TimeSeriesDataset:
    """Mark train/validation/test per series; the validation span equals
    the test span, both at the chronological tail."""
    if test_span < 1:
        raise InvalidConfig(f"test_span must be >= 1, got {test_span}")
    out = []
    for s in ds.series:
        n = len(s)
        if n <= 2 * test_span:
            raise SeriesTooShort(
                f"series {s.series_id!r} has {n} points, needs > {2 * test_span}"
            )
        out.append(replace(s, train_end=n - 2 * test_span, val_end=n - test_span))
    return TimeSeriesDataset(series=tuple(out))


def standardize(ds: TimeSeriesDataset) -> tuple[TimeSeriesDataset, ScalerTable]:
    """Per-series (z - mean)/std with statistics from the training split.

    Population (1/n) standard deviation; a constant training series falls
    back to std 1 so the transform only subtracts the mean.
    """
    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    out = []
    for s in ds.series:
        if s.train_end is None or s.val_end is None:
            raise EmptyTrainSplit(f"series {s.series_id!r} has no split marks")
        if s.train_end < 1:
            raise EmptyTrainSplit(f"series {s.series_id!r} has an empty training split")
        train = s.values[: s.train_end]
        mean = float(train.mean())
        std = float(train.std())
        if std == 0.0:
            std = 1.0
        means[s.series_id] = mean
        stds[s.series_id] = std
        out.append(replace(s, values=(s.values - mean) / std))
    return TimeSeriesDataset(series=tuple(out)), ScalerTable(means, stds)


# ----------------------------------------------------------------------
# mini-batches


@dataclass(frozen=True)
class Window:
    """P teacher-forced steps from a segment of P+1 raw values; the final
    step's target is this window's contribution to the mini-batch."""

    steps: tuple[StepInput, ...]
    targets: np.ndarray

    @property
    def final_target(self) -> float:
        return float(self.targets[-1])


@dataclass(frozen=True)
class MiniBatch:
    """D consecutive windows of one series; alignment index t is the
    newest target time."""

    series: Series
    series_code: int
    t: int
    context: int  # P
    horizon: int  # D

    @property
    def target_times(self) -> range:
        return range(self.t - self.horizon + 1, self.t + 1)

    def targets(self) -> np.ndarray:
        return self.series.values[self.t - self.horizon + 1 : self.t + 1].copy()

    def windows(self) -> list[Window]:
        out = []
        for tau in self.target_times:
            steps = []
            for s in range(tau - self.context + 1, tau + 1):
                hour = None if self.series.hour_codes is None else int(self.series.hour_codes[s])
                dow = None if self.series.dow_codes is None else int(self.series.dow_codes[s])
                steps.append(
                    StepInput(
                        lag_value=float(self.series.values[s - 1]),
                        series_id=self.series_code,
                        hour=hour,
                        dow=dow,
                    )
                )
            targets = self.series.values[tau - self.context + 1 : tau + 1].copy()
            out.append(Window(steps=tuple(steps), targets=targets))
        return out


def make_minibatches(
    series: Series,
    context: int,
    horizon: int,
    stride: int = 1,
    *,
    series_code: int = 0,
    split: str = "train",
) -> list[MiniBatch]:
    """All mini-batch alignments whose D targets lie inside one split.

    Conditioning prefixes may reach into earlier data (for the validation
    and test splits they reach into the preceding split; for training they
    stay inside it by the alignment lower bound).
    """
    if stride < 1:
        raise InvalidConfig(f"stride must be >= 1, got {stride}")
    if context < 1 or horizon < 1:
        raise InvalidConfig("context and horizon must be >= 1")
    n = len(series)
    train_end = series.train_end if series.train_end is not None else n
    val_end = series.val_end if series.val_end is not None else n
    if split == "train":
        lo, hi = context + horizon - 1, train_end
    elif split == "val":
        lo, hi = max(train_end + horizon - 1, context + horizon - 1), val_end
    elif split == "test":
        lo, hi = max(val_end + horizon - 1, context + horizon - 1), n
    else:
        raise InvalidConfig(f"unknown split {split!r}")
    if split == "train" and train_end < context + horizon:
        raise SeriesTooShort(
            f"series {series.series_id!r}: training split of {train_end} points "
            f"cannot hold one mini-batch (needs >= {context + horizon})"
        )
    return [
        MiniBatch(series=series, series_code=series_code, t=t, context=context, horizon=horizon)
        for t in range(lo, hi, stride)
    ]


# ----------------------------------------------------------------------
# synthetic data with controllable error autocorrelation


@dataclass(frozen=True)
class SynthConfig:
    n_series: int = 8
    length: int = 3000
    phi: float = 0.8
    amplitude: float = 2.0
    period: int = 24
    noise_scale: float = 1.0
    seed: int = 0
    granularity: str = "hourly"


def synth_ar(cfg: SynthConfig) -> TimeSeriesDataset:
    """Sinusoid plus per-series offset plus AR(1) noise.

    z_{i,t} = amplitude*sin(2*pi*t/period) + b_i + eta_{i,t} with
    eta_t = phi*eta_{t-1} + sqrt(1-phi^2)*noise_scale*nu_t and a
    stationary start, so the noise variance is noise_scale^2 at every t
    and the lag-k noise autocorrelation is phi^k.
    """
    if not abs(cfg.phi) < 1.0:
        raise InvalidPhi(f"|phi| must be < 1, got {cfg.phi}")
    if cfg.n_series < 1 or cfg.period < 1:
        raise InvalidConfig("n_series and period must be >= 1")
    if cfg.length < 10 * cfg.period:
        raise SeriesTooShort(
            f"length {cfg.length} < 10*period = {10 * cfg.period}"
        )
    rng = np.random.default_rng(cfg.seed)
    offsets = rng.normal(0.0, cfg.amplitude, size=cfg.n_series)
    nu = rng.standard_normal((cfg.n_series, cfg.length))
    eta = np.empty_like(nu)
    eta[:, 0] = cfg.noise_scale * nu[:, 0]
    innov = np.sqrt(1.0 - cfg.phi**2) * cfg.noise_scale
    for t in range(1, cfg.length):
        eta[:, t] = cfg.phi * eta[:, t - 1] + innov * nu[:, t]
    t_axis = np.arange(cfg.length)
    signal = cfg.amplitude * np.sin(2.0 * np.pi * t_axis / cfg.period)
    series = tuple(
        Series(
            series_id=f"s{i}",
            start=0,
            granularity=cfg.granularity,
            values=signal + offsets[i] + eta[i],
        )
        for i in range(cfg.n_series)
    )
    return TimeSeriesDataset(series=series)
