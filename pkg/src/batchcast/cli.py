"""Command-line entry point: synth, train, evaluate, and acf workflows.

One flat JSON experiment config drives every command; ``--set key=value``
overrides individual fields (values parsed as JSON, falling back to raw
strings).  Every run writes a ``run-manifest.json`` capturing the resolved
config and sha256 checksums of the artifacts it produced.

Exit codes are stable API: 0 ok, 2 config error, 3 data error,
4 numerical failure, 5 checkpoint/config incompatibility.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

from . import __version__, backend
from .data import (
    GRANULARITIES,
    SEASON_LENGTH,
    SynthConfig,
    TimeSeriesDataset,
    apply_scaler,
    chronological_split,
    load_dataset,
    synth_ar,
    write_long_csv,
)
from .errors import (
    BatchcastError,
    CheckpointMismatch,
    DivergedLoss,
    DuplicateTimestamp,
    EmptyTrainSplit,
    HistoryTooShort,
    InvalidConfig,
    InvalidPhi,
    LengthMismatch,
    NonUniformSpacing,
    NotPositiveDefinite,
    ParseError,
    SeriesTooShort,
    ShapeMismatch,
)
from .forecast import (
    ForecastConfig,
    SeriesView,
    evaluate_rolling,
    one_step_eval,
)
from .metrics import acf as compute_acf
from .metrics import summarize_rolling
from .net import ModelConfig, load_checkpoint, save_checkpoint
from .training import TrainConfig, train, write_history_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5

_CONFIG_ALIASES = {"P": "context", "D": "horizon", "Q": "pred_range"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat experiment description; P and D default to Q."""

    dataset: str = "dataset.csv"
    format: str = "long-csv"
    granularity: str = "hourly"
    # window ranges; None means "same as pred_range"
    pred_range: int = 12
    context: Optional[int] = None
    horizon: Optional[int] = None
    # model
    hidden: int = 40
    layers: int = 3
    lengthscales: tuple[float, ...] = (1.0, 2.0, 3.0)
    weight_hidden: int = 16
    # training protocol
    mode: str = "gls"
    batch_size: int = 64
    max_epochs: int = 100
    max_batches_per_epoch: int = 100
    lr: float = 0.001
    patience: int = 10
    sigma_floor: float = 1e-4
    clip_norm: float = 10.0
    seed: int = 0
    # evaluation
    n_samples: int = 100
    rolling_starts: int = 7
    eval_mode: str = "calibrated"  # calibrated | iid | seasonal-naive
    crps_method: str = "fitted"
    conditioning: str = "sliding"
    reset_buffer_per_sample: bool = True
    test_span: Optional[int] = None
    acf_max_lag: int = 24
    acf_mode: str = "raw"  # raw | calibrated
    # artifacts
    checkpoint: Optional[str] = None
    out: str = "."
    # synthetic data
    synth_n_series: int = 8
    synth_length: int = 3000
    synth_phi: float = 0.8
    synth_amplitude: float = 2.0
    synth_period: int = 24
    synth_noise_scale: float = 1.0

    @classmethod
    def load(cls, path: Optional[str], overrides: dict) -> "ExperimentConfig":
        raw: dict = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    raw = json.load(fh)
            except FileNotFoundError:
                raise InvalidConfig(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise InvalidConfig(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(raw, dict):
                raise InvalidConfig("config file must hold a JSON object")
        raw.update(overrides)
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = _CONFIG_ALIASES.get(key, key)
            if name not in known:
                raise InvalidConfig(f"unknown config key {key!r}")
            kwargs[name] = value
        cfg = cls(**kwargs)
        if isinstance(cfg.lengthscales, list):
            cfg = replace(cfg, lengthscales=tuple(float(x) for x in cfg.lengthscales))
        return cfg

    def resolved(self) -> "ExperimentConfig":
        out = self
        if out.context is None:
            out = replace(out, context=out.pred_range)
        if out.horizon is None:
            out = replace(out, horizon=out.pred_range)
        if out.test_span is None:
            out = replace(out, test_span=out.pred_range + out.rolling_starts - 1)
        if out.granularity not in GRANULARITIES:
            raise InvalidConfig(f"unknown granularity {out.granularity!r}")
        if out.format not in ("long-csv", "wide-csv"):
            raise InvalidConfig(f"unknown dataset format {out.format!r}")
        if out.eval_mode not in ("calibrated", "iid", "seasonal-naive"):
            raise InvalidConfig(f"unknown eval_mode {out.eval_mode!r}")
        if out.acf_mode not in ("raw", "calibrated"):
            raise InvalidConfig(f"unknown acf_mode {out.acf_mode!r}")
        if out.test_span < out.pred_range + out.rolling_starts - 1:
            raise InvalidConfig(
                f"test_span {out.test_span} < Q + rolling_starts - 1 = "
                f"{out.pred_range + out.rolling_starts - 1}"
            )
        return out

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            context=self.context,
            horizon=self.horizon,
            pred_range=self.pred_range,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            max_batches_per_epoch=self.max_batches_per_epoch,
            lr=self.lr,
            patience=self.patience,
            seed=self.seed,
            sigma_floor=self.sigma_floor,
            clip_norm=self.clip_norm,
        )

    def model_config(self, ds: TimeSeriesDataset) -> ModelConfig:
        first = ds.series[0]
        return ModelConfig(
            n_series=ds.n_series,
            context=self.context,
            horizon=self.horizon,
            hidden=self.hidden,
            layers=self.layers,
            lengthscales=self.lengthscales,
            with_hour=first.hour_codes is not None,
            with_dow=first.dow_codes is not None,
            weight_hidden=self.weight_hidden,
        )

    def forecast_config(self) -> ForecastConfig:
        mode = "iid" if self.eval_mode == "iid" else "calibrated"
        return ForecastConfig(
            pred_range=self.pred_range,
            n_samples=self.n_samples,
            mode=mode,
            seed=self.seed,
            conditioning=self.conditioning,
            reset_buffer_per_sample=self.reset_buffer_per_sample,
        )


# ----------------------------------------------------------------------
# helpers


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: str, command: str, cfg: ExperimentConfig, artifacts: list[str]):
    manifest = {
        "command": command,
        "version": __version__,
        "backend": backend.BACKEND,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "artifacts": {os.path.basename(p): _sha256(p) for p in artifacts},
    }
    path = os.path.join(out_dir, "run-manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=list)
    return path


def _outdir(cfg: ExperimentConfig) -> str:
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _load_split_dataset(cfg: ExperimentConfig) -> TimeSeriesDataset:
    if not os.path.exists(cfg.dataset):
        raise InvalidConfig(f"dataset file not found: {cfg.dataset}")
    ds = load_dataset(cfg.dataset, cfg.format, cfg.granularity)
    return chronological_split(ds, cfg.test_span)


def _load_compatible_checkpoint(cfg: ExperimentConfig, ds: TimeSeriesDataset):
    if cfg.checkpoint is None:
        raise InvalidConfig("a checkpoint path is required (set 'checkpoint')")
    if not os.path.exists(cfg.checkpoint):
        raise InvalidConfig(f"checkpoint file not found: {cfg.checkpoint}")
    try:
        model, scaler_state, extra = load_checkpoint(cfg.checkpoint)
    except ShapeMismatch as exc:
        raise CheckpointMismatch(str(exc)) from None
    mc = model.config
    if mc.n_series != ds.n_series:
        raise CheckpointMismatch(
            f"emb_series has {mc.n_series} rows but the dataset has {ds.n_series} series"
        )
    if mc.context != cfg.context or mc.horizon != cfg.horizon:
        raise CheckpointMismatch(
            f"checkpoint windows (P={mc.context}, D={mc.horizon}) differ from "
            f"config (P={cfg.context}, D={cfg.horizon})"
        )
    first = ds.series[0]
    if mc.with_hour != (first.hour_codes is not None) or mc.with_dow != (first.dow_codes is not None):
        raise CheckpointMismatch(
            f"checkpoint covariates (hour={mc.with_hour}, dow={mc.with_dow}) do not "
            f"match granularity {ds.granularity!r}"
        )
    if scaler_state is None:
        raise CheckpointMismatch("checkpoint carries no standardization table")
    missing = [sid for sid in ds.ids if sid not in scaler_state["means"]]
    if missing:
        raise CheckpointMismatch(f"standardization table lacks series {missing[:3]}")
    from .data import ScalerTable

    return model, ScalerTable.from_state(scaler_state), extra


def _render_ts(series, index: int):
    ts = series.timestamp_at(index)
    return ts if isinstance(ts, int) else ts.isoformat()


# ----------------------------------------------------------------------
# commands


def cmd_synth(cfg: ExperimentConfig) -> int:
    out_dir = _outdir(cfg)
    synth = SynthConfig(
        n_series=cfg.synth_n_series,
        length=cfg.synth_length,
        phi=cfg.synth_phi,
        amplitude=cfg.synth_amplitude,
        period=cfg.synth_period,
        noise_scale=cfg.synth_noise_scale,
        seed=cfg.seed,
        granularity=cfg.granularity,
    )
    ds = synth_ar(synth)
    write_long_csv(ds, cfg.dataset)
    manifest = _write_manifest(out_dir, "synth", cfg, [cfg.dataset])
    print(
        f"wrote {ds.n_series} series x {cfg.synth_length} steps "
        f"(phi={cfg.synth_phi}, period={cfg.synth_period}) to {cfg.dataset}"
    )
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig) -> int:
    out_dir = _outdir(cfg)
    ds = _load_split_dataset(cfg)
    result = train(cfg.train_config(), ds, cfg.model_config(ds))
    ckpt_path = cfg.checkpoint or os.path.join(out_dir, f"checkpoint-{cfg.mode}.json")
    save_checkpoint(
        ckpt_path,
        result.model,
        scaler_state=result.scaler.to_state(),
        extra={"mode": cfg.mode, "best_epoch": result.best_epoch, "best_val": result.best_val},
    )
    history_path = os.path.join(out_dir, "history.csv")
    write_history_csv(history_path, result.history)
    manifest = _write_manifest(out_dir, "train", cfg, [ckpt_path, history_path])
    print(
        f"trained mode={cfg.mode} for {result.stopped_epoch} epochs; "
        f"best epoch {result.best_epoch} (val loss {result.best_val:.6f})"
    )
    print(f"checkpoint: {ckpt_path}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    out_dir = _outdir(cfg)
    ds = _load_split_dataset(cfg)
    naive = cfg.eval_mode == "seasonal-naive"
    if naive:
        from .data import standardize

        ds_std, scaler = standardize(ds)
        model = None
    else:
        model, scaler, _ = _load_compatible_checkpoint(cfg, ds)
        ds_std = apply_scaler(ds, scaler)

    fc = cfg.forecast_config()
    results = evaluate_rolling(
        model,
        ds_std,
        scaler,
        cfg.rolling_starts,
        fc,
        naive_season=SEASON_LENGTH[cfg.granularity] if naive else None,
    )
    report = summarize_rolling(
        results,
        ds_std,
        scaler,
        crps_method=cfg.crps_method,
        metadata={
            "eval_mode": cfg.eval_mode,
            "seed": cfg.seed,
            "n_samples": cfg.n_samples,
            "rolling_starts": cfg.rolling_starts,
            "crps_method": cfg.crps_method,
            "checkpoint": cfg.checkpoint,
            "backend": backend.BACKEND,
        },
    )

    report_path = os.path.join(out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)

    by_id = {s.series_id: s for s in ds_std.series}
    forecast_path = os.path.join(out_dir, "forecast.csv")
    with open(forecast_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("series_id,start,step,sample_idx,value\n")
        for res in results:
            start = _render_ts(by_id[res.series_id], res.start)
            for step in range(res.pred_range):
                for idx in range(res.n_samples):
                    fh.write(
                        f"{res.series_id},{start},{step + 1},{idx},"
                        f"{res.samples[idx, step]!r}\n"
                    )
    quantile_path = os.path.join(out_dir, "quantiles.csv")
    with open(quantile_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("series_id,start,step,rho,value\n")
        for res in results:
            start = _render_ts(by_id[res.series_id], res.start)
            for step in range(res.pred_range):
                for li, rho in enumerate(res.quantile_levels):
                    fh.write(
                        f"{res.series_id},{start},{step + 1},{rho},"
                        f"{res.quantiles[li, step]!r}\n"
                    )

    artifacts = [report_path, forecast_path, quantile_path]
    if not naive:
        weights_path = os.path.join(out_dir, "weights.csv")
        n_comp = model.config.n_components
        with open(weights_path, "w", newline="", encoding="utf-8") as fh:
            fh.write("series_id,step," + ",".join(f"w_{m}" for m in range(n_comp)) + "\n")
            for code, s in enumerate(ds_std.series):
                view = SeriesView(series=s, code=code, scaler=scaler)
                diag = one_step_eval(model, view, s.val_end, len(s), calibrated=False)
                for i, t in enumerate(diag.times):
                    row = ",".join(repr(float(v)) for v in diag.weights[i])
                    fh.write(f"{s.series_id},{_render_ts(s, int(t))},{row}\n")
        artifacts.append(weights_path)

    manifest = _write_manifest(out_dir, "evaluate", cfg, artifacts)
    print(
        f"eval_mode={cfg.eval_mode}: crps={report.crps:.6f} "
        f"risk_0.5={report.risk_50:.6f} risk_0.9={report.risk_90:.6f} mse={report.mse:.6g}"
    )
    print(f"report: {report_path}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_acf(cfg: ExperimentConfig) -> int:
    out_dir = _outdir(cfg)
    ds = _load_split_dataset(cfg)
    model, scaler, _ = _load_compatible_checkpoint(cfg, ds)
    ds_std = apply_scaler(ds, scaler)
    calibrated = cfg.acf_mode == "calibrated"
    acf_path = os.path.join(out_dir, "acf.csv")
    lag1 = {}
    with open(acf_path, "w", newline="", encoding="utf-8") as fh:
        fh.write("series_id,lag,acf,band\n")
        for code, s in enumerate(ds_std.series):
            view = SeriesView(series=s, code=code, scaler=scaler)
            diag = one_step_eval(model, view, s.val_end, len(s), calibrated=calibrated)
            values, band = compute_acf(diag.eps, cfg.acf_max_lag)
            lag1[s.series_id] = (values[1], band)
            for lag in range(cfg.acf_max_lag + 1):
                fh.write(f"{s.series_id},{lag},{values[lag]!r},{band!r}\n")
    manifest = _write_manifest(out_dir, "acf", cfg, [acf_path])
    for sid, (r1, band) in lag1.items():
        flag = "outside" if abs(r1) > band else "inside"
        print(f"{sid}: lag-1 acf {r1:+.4f} ({flag} the +-{band:.4f} band)")
    print(f"acf table: {acf_path}")
    print(f"manifest: {manifest}")
    return EXIT_OK


# ----------------------------------------------------------------------
# argument parsing and dispatch


def _parse_overrides(items) -> dict:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            overrides[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key.strip()] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="batchcast",
        description="Probabilistic forecasting with batch-GLS training and calibrated sampling",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic dataset with AR(1) error autocorrelation"),
        ("train", "train a forecaster (iid or gls mode)"),
        ("evaluate", "rolling evaluation of a checkpoint"),
        ("acf", "residual autocorrelation diagnostics for a checkpoint"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment config JSON file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", dest="overrides",
                       help="override a config field (value parsed as JSON)")
        p.add_argument("--out", help="output directory (overrides config 'out')")
    return parser


_COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate, "acf": cmd_acf}

_DATA_ERRORS = (
    ParseError,
    NonUniformSpacing,
    DuplicateTimestamp,
    EmptyTrainSplit,
    SeriesTooShort,
    HistoryTooShort,
    LengthMismatch,
)


def _exit_code_for(exc: BatchcastError, command: str) -> int:
    if isinstance(exc, (DivergedLoss, NotPositiveDefinite)):
        return EXIT_NUMERIC
    if isinstance(exc, (CheckpointMismatch, ShapeMismatch)):
        return EXIT_COMPAT
    if isinstance(exc, (InvalidConfig, InvalidPhi)):
        return EXIT_CONFIG
    if isinstance(exc, _DATA_ERRORS):
        # for synth the data parameters are the config
        return EXIT_CONFIG if command == "synth" else EXIT_DATA
    return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    command = args.command
    try:
        cfg = ExperimentConfig.load(args.config, _parse_overrides(args.overrides))
        if args.out is not None:
            cfg = replace(cfg, out=args.out)
        cfg = cfg.resolved()
        return _COMMANDS[command](cfg)
    except BatchcastError as exc:
        code = _exit_code_for(exc, command)
        print(f"error: {exc}", file=sys.stderr)
        return code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
