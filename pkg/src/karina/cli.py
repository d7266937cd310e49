"""Command-line front end composing the library into runnable experiments.

Five commands: train, finetune, evaluate, rollout, ablate.  Every run is
driven by a flat key=value config (file plus --set overrides), writes a
resolved copy of that config next to its outputs, and draws all of its
randomness from the single `seed` key, so any run can be reproduced from
the resolved copy alone.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import os
import sys
from dataclasses import dataclass, replace

import numpy as np

from .data import (
    DataError,
    FileSource,
    GridFile,
    SyntheticField,
    SyntheticSource,
    SyntheticSpec,
    compute_norm_stats,
    generate_synthetic,
    normalize,
    read_grid,
    static_channel_mask,
    write_grid,
)
from .metrics import (
    MetricsError,
    MetricSample,
    acc,
    fit_climatology,
    latitude_weights,
    metrics_to_csv,
    weighted_rmse,
)
from .model import ModelConfig, ModelError, build, load_checkpoint, save_checkpoint
from .rollout import RolloutError, drift_report, model_fingerprint, rollout
from .training import (
    FinetunePhase,
    TrainConfig,
    TrainingError,
    finetune,
    train,
)


class CliError(Exception):
    """Configuration or input problem; maps to exit code 1."""


class UsageError(Exception):
    """Malformed command line; maps to exit code 1."""


# ---------------------------------------------------------------------------
# config schema

def _parse_bool(raw):
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError(f"expected true or false, got {raw!r}")


def _parse_ints(raw):
    parts = [p.strip() for p in raw.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _format_bool(v):
    return "true" if v else "false"


def _format_ints(v):
    return ",".join(str(int(e)) for e in v)


# parser/formatter pairs; formatters must round-trip through the parser
_TYPES = {
    "int": (int, str),
    "float": (float, repr),
    "bool": (_parse_bool, _format_bool),
    "str": (lambda raw: raw, lambda v: v),
    "ints": (_parse_ints, _format_ints),
}

# key -> (type name, default).  model.in_channels/out_channels of 0 mean
# "match the data"; the inferred value is written to the resolved config.
SCHEMA = {
    "seed": ("int", 0),
    "data.path": ("str", ""),
    "data.train_days": ("int", 60),
    "data.val_days": ("int", 0),
    "data.test_days": ("int", 20),
    "synth.n_blob_channels": ("int", 2),
    "synth.tilt_deg": ("float", 90.0),
    "synth.speed_deg_per_day": ("float", 15.0),
    "synth.blob_width_deg": ("float", 20.0),
    "synth.noise": ("float", 0.0),
    "synth.n_lat": ("int", 24),
    "synth.n_lon": ("int", 48),
    "synth.start_day": ("int", 0),
    "model.in_channels": ("int", 0),
    "model.out_channels": ("int", 0),
    "model.stage_dims": ("ints", (8, 16)),
    "model.depths": ("ints", (1, 1)),
    "model.stem_kernel": ("int", 3),
    "model.padding_mode": ("str", "geocyclic"),
    "model.se_enabled": ("bool", True),
    "model.reduction_ratio": ("int", 4),
    "model.layer_scale_init": ("float", 1e-6),
    "model.drop_path_rate": ("float", 0.0),
    "train.lr": ("float", 1e-3),
    "train.lr_min": ("float", 0.0),
    "train.epochs": ("int", 150),
    "train.weight_decay": ("float", 0.05),
    "train.batch_size": ("int", 16),
    "train.loss": ("str", "l2"),
    "train.schedule": ("str", "cosine"),
    "train.lat_weighted_loss": ("bool", False),
    "train.exclude_static_loss": ("bool", False),
    "finetune.checkpoint": ("str", ""),
    "finetune.phases": ("str", "0,12:0.005;0,6,12,18:0.0025;all:0.0001"),
    "eval.checkpoint": ("str", ""),
    "eval.model": ("str", "checkpoint"),
    "eval.leads": ("ints", (1, 3, 5, 7)),
    "eval.acc": ("str", "auto"),
    "eval.harmonics": ("int", 2),
    "eval.weighted": ("bool", True),
    "eval.static_reset": ("bool", True),
    "rollout.checkpoint": ("str", ""),
    "rollout.horizon": ("int", 30),
    "rollout.init_day": ("int", -1),
    "rollout.static_reset": ("bool", True),
    "rollout.single_file": ("bool", False),
    "ablate.leads": ("ints", (1, 3, 5, 7)),
    "ablate.include_circular": ("bool", False),
    "ablate.kernel_sweep": ("bool", False),
    "ablate.polar_rows": ("int", 5),
}


def default_config():
    return {key: default for key, (_, default) in SCHEMA.items()}


def _apply(cfg, key, raw, where):
    if key not in SCHEMA:
        raise CliError(f"unknown config key {key!r} ({where})")
    parser, _ = _TYPES[SCHEMA[key][0]]
    try:
        cfg[key] = parser(raw)
    except ValueError as err:
        raise CliError(f"bad value for {key} ({where}): {err}") from None


def parse_config_text(text, cfg=None, where="config"):
    """Apply key=value lines onto a config dict; '#' starts a comment."""
    cfg = default_config() if cfg is None else cfg
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise CliError(f"{where} line {lineno} is not key=value: {line!r}")
        _apply(cfg, key.strip(), raw.strip(), f"{where} line {lineno}")
    return cfg


def load_config(config_path=None, sets=(), seed=None):
    cfg = default_config()
    if config_path:
        if not os.path.exists(config_path):
            raise CliError(f"config file does not exist: {config_path}")
        with open(config_path, "r", encoding="utf-8") as fh:
            parse_config_text(fh.read(), cfg, where=config_path)
    for item in sets:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        _apply(cfg, key.strip(), raw.strip(), "--set")
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def resolved_text(cfg):
    lines = []
    for key in sorted(SCHEMA):
        _, fmt = _TYPES[SCHEMA[key][0]]
        lines.append(f"{key}={fmt(cfg[key])}")
    return "\n".join(lines) + "\n"


def _write_resolved(cfg, out_dir):
    with open(os.path.join(out_dir, "config.resolved"), "w", encoding="utf-8") as fh:
        fh.write(resolved_text(cfg))


# ---------------------------------------------------------------------------
# dataset assembly

@dataclass
class Bundle:
    """Loaded series split into contiguous train/val/test slices.

    stats and the static-channel mask come from the training slice only,
    so the held-out slices never leak into normalization.
    """

    gf: GridFile
    train: GridFile
    val: GridFile
    test: GridFile
    stats: object
    static_mask: np.ndarray
    spec: SyntheticSpec


def _slice_grid(gf, a, b):
    if b <= a:
        return None
    return GridFile(channels=gf.channels, dates=gf.dates[a:b], values=gf.values[a:b])


def _load_bundle(cfg):
    tr = cfg["data.train_days"]
    va = cfg["data.val_days"]
    te = cfg["data.test_days"]
    for key, v in (("data.train_days", tr), ("data.val_days", va), ("data.test_days", te)):
        if v < 0:
            raise CliError(f"{key} must be non-negative, got {v}")
    if tr < 2:
        raise CliError(f"data.train_days must be at least 2, got {tr}")
    if va == 1:
        raise CliError("data.val_days must be 0 or at least 2 (a pair needs two days)")
    path = cfg["data.path"]
    try:
        if path:
            if not os.path.exists(path):
                raise CliError(f"data.path does not exist: {path}")
            gf = read_grid(path)
            spec = None
            if tr + va + te > gf.n_time:
                raise CliError(
                    f"splits need {tr + va + te} days, data.path holds {gf.n_time}"
                )
        else:
            spec = SyntheticSpec(
                n_days=tr + va + te,
                seed=cfg["seed"],
                n_blob_channels=cfg["synth.n_blob_channels"],
                tilt_deg=cfg["synth.tilt_deg"],
                speed_deg_per_day=cfg["synth.speed_deg_per_day"],
                blob_width_deg=cfg["synth.blob_width_deg"],
                noise=cfg["synth.noise"],
                n_lat=cfg["synth.n_lat"],
                n_lon=cfg["synth.n_lon"],
                start_day=cfg["synth.start_day"],
            )
            gf = generate_synthetic(spec)
    except DataError as err:
        raise CliError(str(err)) from err
    train_gf = _slice_grid(gf, 0, tr)
    val_gf = _slice_grid(gf, tr, tr + va)
    test_gf = _slice_grid(gf, tr + va, tr + va + te)
    stats = compute_norm_stats(train_gf)
    return Bundle(
        gf=gf, train=train_gf, val=val_gf, test=test_gf,
        stats=stats, static_mask=static_channel_mask(train_gf), spec=spec,
    )


def _resolve_channels(cfg, bundle):
    """Fill zero channel counts from the data; reject mismatches."""
    c = len(bundle.gf.channels)
    if cfg["model.in_channels"] == 0:
        cfg["model.in_channels"] = c
    if cfg["model.out_channels"] == 0:
        cfg["model.out_channels"] = cfg["model.in_channels"]
    if cfg["model.in_channels"] != c:
        raise CliError(
            f"model.in_channels is {cfg['model.in_channels']}, data has {c} channels"
        )
    if cfg["model.out_channels"] != c:
        raise CliError(
            f"model.out_channels is {cfg['model.out_channels']}, "
            f"one-step forecasting needs {c}"
        )


def _model_config(cfg):
    try:
        return ModelConfig(
            in_channels=cfg["model.in_channels"],
            out_channels=cfg["model.out_channels"],
            stage_dims=cfg["model.stage_dims"],
            depths=cfg["model.depths"],
            stem_kernel=cfg["model.stem_kernel"],
            padding_mode=cfg["model.padding_mode"],
            se_enabled=cfg["model.se_enabled"],
            reduction_ratio=cfg["model.reduction_ratio"],
            layer_scale_init=cfg["model.layer_scale_init"],
            drop_path_rate=cfg["model.drop_path_rate"],
        ).validate()
    except ModelError as err:
        raise CliError(str(err)) from err


def _train_config(cfg):
    try:
        return TrainConfig(
            lr=cfg["train.lr"],
            epochs=cfg["train.epochs"],
            weight_decay=cfg["train.weight_decay"],
            batch_size=cfg["train.batch_size"],
            lr_min=cfg["train.lr_min"],
            loss=cfg["train.loss"],
            schedule=cfg["train.schedule"],
            seed=cfg["seed"],
        ).validate()
    except TrainingError as err:
        raise CliError(str(err)) from err


def _loss_weights(cfg, bundle):
    w = None
    if cfg["train.lat_weighted_loss"]:
        w = latitude_weights(bundle.train.grid).astype(np.float32)[:, None]
    if cfg["train.exclude_static_loss"]:
        mask = (~bundle.static_mask).astype(np.float32)[:, None, None]
        if not mask.any():
            raise CliError("every channel is static; nothing is left to fit")
        w = mask if w is None else w * mask
    return w


def _load_model(cfg, key, bundle):
    path = cfg[key]
    if not path:
        raise CliError(f"{key} is required")
    if not os.path.exists(path):
        raise CliError(f"{key} does not exist: {path}")
    try:
        model = load_checkpoint(path)
    except ModelError as err:
        raise CliError(str(err)) from err
    c = len(bundle.gf.channels)
    if model.config.in_channels != c or model.config.out_channels != c:
        raise CliError(
            f"checkpoint maps {model.config.in_channels} -> "
            f"{model.config.out_channels} channels, data has {c}"
        )
    return model


# ---------------------------------------------------------------------------
# forecast scoring shared by evaluate and ablate

def _polar_rmse(forecast, truth, grid, n_rows):
    """Plain RMS error over the n_rows rows nearest each pole.

    Deliberately unweighted: cos(lat) weights would mute exactly the
    rows this diagnostic exists to watch.
    """
    rows = np.r_[0:n_rows, grid.n_lat - n_rows:grid.n_lat]
    d = (np.asarray(forecast, dtype=np.float64)
         - np.asarray(truth, dtype=np.float64))[..., rows, :]
    ms = (d * d).sum(axis=(-2, -1)) / (rows.size * grid.n_lon)
    return np.sqrt(ms)


@dataclass
class Scores:
    leads: tuple
    channels: tuple
    rmse: dict            # lead -> (channel,) mean over init dates
    acc: dict             # empty when no climatology was supplied
    acc_mask: np.ndarray  # channels whose ACC is defined
    polar: dict           # empty unless polar_rows > 0
    n_inits: int
    polar_rows: int = 0


def _acc_usable_channels(test, stats, clim, weighted, leads):
    """Channels with real truth anomaly variance at every scorable
    valid date.  ACC is a spatial correlation: static or spatially
    uniform channels have no anomaly structure to correlate, so their
    ACC is undefined and they drop out of the report.  The floor is
    relative: anomaly spread below 1e-4 of the channel scale is
    float32 storage noise, not weather."""
    grid = test.grid
    if weighted:
        w = latitude_weights(grid)[None, :, None]
    else:
        w = np.ones((1, 1, 1))
    n = grid.n_lat * grid.n_lon
    floor = (1e-4 * np.maximum(np.abs(stats.mean), stats.std)) ** 2
    usable = np.ones(len(test.channels), dtype=bool)
    for k in range(min(leads), test.n_time):
        anom = test.values[k].astype(np.float64) - clim.evaluate(float(test.dates[k]))
        mean = (w * anom).sum(axis=(-2, -1)) / n
        var = (w * (anom - mean[:, None, None]) ** 2).sum(axis=(-2, -1)) / n
        usable &= var > floor
    return usable


def _score_forecasts(bundle, leads, mode, model=None, static_reset=True,
                     weighted=True, clim=None, polar_rows=0):
    """Mean per-channel scores over every admissible init date in the
    test slice.  mode is one of checkpoint, truth, persistence."""
    test = bundle.test
    if test is None:
        raise CliError("data.test_days must be positive to evaluate")
    grid = test.grid
    if polar_rows and 2 * polar_rows > grid.n_lat:
        raise CliError(
            f"ablate.polar_rows {polar_rows} does not fit {grid.n_lat} rows"
        )
    max_lead = max(leads)
    n_inits = test.n_time - max_lead
    if n_inits < 1:
        raise CliError(
            f"data.test_days ({test.n_time}) must exceed the largest lead ({max_lead})"
        )
    z = normalize(test.values, bundle.stats) if mode == "checkpoint" else None
    static = bundle.static_mask if static_reset else None
    c = len(test.channels)
    rmse_sum = {L: np.zeros(c) for L in leads}
    acc_sum = None
    acc_mask = np.zeros(c, dtype=bool)
    clim_sub = None
    if clim is not None:
        acc_mask = _acc_usable_channels(test, bundle.stats, clim, weighted, leads)
        if acc_mask.any():
            acc_sum = {L: np.zeros(c) for L in leads}
            clim_sub = replace(clim, coeffs=clim.coeffs[:, acc_mask])
    polar_sum = {L: np.zeros(c) for L in leads} if polar_rows else None
    for i in range(n_inits):
        if mode == "truth":
            fields = test.values[i + 1:i + max_lead + 1]
        elif mode == "persistence":
            fields = np.broadcast_to(test.values[i], (max_lead,) + test.values[i].shape)
        else:
            series = rollout(model, z[i], max_lead, bundle.stats, static,
                             init_date=float(test.dates[i]))
            if series.blowup_step is not None:
                raise RolloutError(
                    f"model blew up at step {series.blowup_step} "
                    f"from init date {test.dates[i]}"
                )
            fields = series.steps
        for L in leads:
            sample = MetricSample(
                forecast=fields[L - 1], truth=test.values[i + L], grid=grid,
                valid_date=float(test.dates[i + L]), lead_days=L,
            )
            rmse_sum[L] += weighted_rmse(sample, weighted=weighted)
            if acc_sum is not None:
                sub = MetricSample(
                    forecast=np.asarray(fields[L - 1])[acc_mask],
                    truth=test.values[i + L][acc_mask], grid=grid,
                    valid_date=float(test.dates[i + L]), lead_days=L,
                )
                acc_sum[L][acc_mask] += acc(sub, clim_sub, weighted=weighted)
            if polar_sum is not None:
                polar_sum[L] += _polar_rmse(fields[L - 1], test.values[i + L],
                                            grid, polar_rows)
    return Scores(
        leads=tuple(leads),
        channels=test.channels,
        rmse={L: s / n_inits for L, s in rmse_sum.items()},
        acc={} if acc_sum is None else {L: s / n_inits for L, s in acc_sum.items()},
        acc_mask=acc_mask,
        polar={} if polar_sum is None else {L: s / n_inits for L, s in polar_sum.items()},
        n_inits=n_inits,
        polar_rows=polar_rows,
    )


def _validated_leads(cfg, key):
    leads = cfg[key]
    if any(l < 1 for l in leads):
        raise CliError(f"{key} must be positive day counts, got {leads}")
    if len(set(leads)) != len(leads):
        raise CliError(f"{key} must be unique, got {leads}")
    return tuple(sorted(leads))


# ---------------------------------------------------------------------------
# commands

def cmd_train(cfg, out_dir):
    bundle = _load_bundle(cfg)
    _resolve_channels(cfg, bundle)
    _write_resolved(cfg, out_dir)
    tcfg = _train_config(cfg)
    weights = _loss_weights(cfg, bundle)
    model = build(_model_config(cfg), seed=cfg["seed"])
    pairs = FileSource(bundle.train, bundle.stats).pairs()
    val_pairs = None
    if bundle.val is not None:
        val_pairs = FileSource(bundle.val, bundle.stats).pairs()
    report = train(model, pairs, tcfg, val_pairs=val_pairs, loss_weights=weights)
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.krna"))
    report.to_csv(os.path.join(out_dir, "train_report.csv"))
    print(
        f"trained {model.param_count()} parameters for {tcfg.epochs} epochs "
        f"on {pairs.x.shape[0]} pairs; final loss {report.final_train_loss:.6g}; "
        f"model {model_fingerprint(model)}"
    )
    return 0


def _parse_phases(raw):
    phases = []
    for part in raw.split(";"):
        part = part.strip()
        if not part:
            continue
        lags_s, sep, lr_s = part.rpartition(":")
        if not sep:
            raise CliError(
                f"finetune.phases segment {part!r} is not lags:lr"
            )
        try:
            if lags_s.strip() == "all":
                lags = tuple(range(24))
            else:
                lags = tuple(int(t) for t in lags_s.split(","))
            phases.append(FinetunePhase(lag_set=lags, lr=float(lr_s)).validate())
        except (ValueError, TrainingError) as err:
            raise CliError(f"bad finetune.phases segment {part!r}: {err}") from None
    if not phases:
        raise CliError("finetune.phases is empty")
    return tuple(phases)


def cmd_finetune(cfg, out_dir):
    bundle = _load_bundle(cfg)
    _resolve_channels(cfg, bundle)
    model = _load_model(cfg, "finetune.checkpoint", bundle)
    phases = _parse_phases(cfg["finetune.phases"])
    _write_resolved(cfg, out_dir)
    tcfg = _train_config(cfg)
    weights = _loss_weights(cfg, bundle)
    if bundle.spec is not None:
        # restrict the generator to the training window; the analytic
        # fields for those days are identical under the shorter spec
        train_spec = replace(bundle.spec, n_days=bundle.train.n_time)
        source = SyntheticSource(SyntheticField(train_spec), bundle.stats)
    else:
        source = FileSource(bundle.train, bundle.stats)
    val_pairs = None
    if bundle.val is not None:
        val_pairs = FileSource(bundle.val, bundle.stats).pairs()
    try:
        report = finetune(model, source, tcfg, phases=phases,
                          val_pairs=val_pairs, loss_weights=weights)
    except DataError as err:
        raise CliError(str(err)) from err
    save_checkpoint(model, os.path.join(out_dir, "checkpoint.krna"))
    report.to_csv(os.path.join(out_dir, "finetune_report.csv"))
    print(
        f"fine-tuned over {len(phases)} phases ({len(report.records)} epochs); "
        f"final loss {report.final_train_loss:.6g}; model {model_fingerprint(model)}"
    )
    return 0


def _fit_climatology(cfg, bundle):
    """Harmonic climatology from the training slice, or None.

    eval.acc: on = required (error when the slice cannot support a fit),
    off = skipped, auto = fitted when the slice is long enough.
    """
    mode = cfg["eval.acc"]
    if mode not in ("auto", "on", "off"):
        raise CliError(f"eval.acc must be auto, on, or off, got {mode!r}")
    if mode == "off":
        return None
    try:
        return fit_climatology(
            bundle.train.values.astype(np.float64),
            bundle.train.dates.astype(np.float64),
            n_harmonics=cfg["eval.harmonics"],
        )
    except MetricsError as err:
        if mode == "on":
            raise CliError(f"eval.acc=on but climatology fit failed: {err}") from err
        return None


def cmd_evaluate(cfg, out_dir):
    bundle = _load_bundle(cfg)
    _resolve_channels(cfg, bundle)
    mode = cfg["eval.model"]
    if mode not in ("checkpoint", "truth", "persistence"):
        raise CliError(
            f"eval.model must be checkpoint, truth, or persistence, got {mode!r}"
        )
    model = _load_model(cfg, "eval.checkpoint", bundle) if mode == "checkpoint" else None
    leads = _validated_leads(cfg, "eval.leads")
    clim = _fit_climatology(cfg, bundle)
    _write_resolved(cfg, out_dir)
    scores = _score_forecasts(
        bundle, leads, mode, model=model,
        static_reset=cfg["eval.static_reset"], weighted=cfg["eval.weighted"],
        clim=clim,
    )
    baseline = _score_forecasts(
        bundle, leads, "persistence",
        static_reset=False, weighted=cfg["eval.weighted"], clim=None,
    )
    rows = []
    for ci, name in enumerate(scores.channels):
        for L in leads:
            rows.append((name, L, "rmse", scores.rmse[L][ci]))
            if scores.acc and scores.acc_mask[ci]:
                rows.append((name, L, "acc", scores.acc[L][ci]))
    metrics_to_csv(rows, os.path.join(out_dir, "metrics.csv"))
    base_rows = [
        (name, L, "rmse", baseline.rmse[L][ci])
        for ci, name in enumerate(baseline.channels)
        for L in leads
    ]
    metrics_to_csv(base_rows, os.path.join(out_dir, "baseline.csv"))
    lines = ["lead_days," + ",".join(scores.channels)]
    for L in leads:
        lines.append(f"{L}," + ",".join(repr(float(v)) for v in scores.rmse[L]))
    with open(os.path.join(out_dir, "rmse_by_lead.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    acc_note = "with acc" if scores.acc else "acc skipped"
    print(
        f"scored {mode} over {scores.n_inits} init dates at leads "
        f"{','.join(str(l) for l in leads)} ({acc_note}); "
        f"lead-1 mean rmse {float(np.mean(scores.rmse[leads[0]])):.6g}"
    )
    return 0


def cmd_rollout(cfg, out_dir):
    bundle = _load_bundle(cfg)
    _resolve_channels(cfg, bundle)
    model = _load_model(cfg, "rollout.checkpoint", bundle)
    horizon = cfg["rollout.horizon"]
    if horizon < 1:
        raise CliError(f"rollout.horizon must be at least 1, got {horizon}")
    idx = cfg["rollout.init_day"]
    if idx < 0:
        idx += bundle.gf.n_time
    if not 0 <= idx < bundle.gf.n_time:
        raise CliError(
            f"rollout.init_day {cfg['rollout.init_day']} outside the "
            f"{bundle.gf.n_time}-day series"
        )
    _write_resolved(cfg, out_dir)
    z0 = normalize(bundle.gf.values[idx], bundle.stats)
    static = bundle.static_mask if cfg["rollout.static_reset"] else None
    series = rollout(model, z0, horizon, bundle.stats, static,
                     init_date=float(bundle.gf.dates[idx]))
    if series.horizon_done == 0:
        raise RolloutError("model blew up on the first step; nothing to write")
    if cfg["rollout.single_file"]:
        write_grid(series.to_grid_file(), os.path.join(out_dir, "forecast.grid"))
        n_files = 1
    else:
        base_date = int(round(series.init_date))
        for k in range(series.horizon_done):
            step = GridFile(
                channels=series.channels,
                dates=np.asarray([base_date + k + 1], dtype=np.uint32),
                values=series.steps[k:k + 1],
            )
            write_grid(step, os.path.join(out_dir, f"forecast_{k + 1:03d}.grid"))
        n_files = series.horizon_done
    drift_report(series, os.path.join(out_dir, "drift.csv"))
    if series.blowup_step is not None:
        with open(os.path.join(out_dir, "BLOWUP"), "w", encoding="utf-8") as fh:
            fh.write(f"forecast blew up at step {series.blowup_step}\n")
        print(
            f"warning: blew up at step {series.blowup_step}; "
            f"wrote the {series.horizon_done} finite steps"
        )
    print(
        f"rolled out {series.horizon_done} steps from day {bundle.gf.dates[idx]} "
        f"into {n_files} file(s); model {series.checkpoint_id}"
    )
    return 0


ABLATION_VARIANTS = (
    ("plain", "zero", False),
    ("padded", "geocyclic", False),
    ("padded_senet", "geocyclic", True),
)


def _variant_rows(tag, scores):
    rows = []
    for ci, name in enumerate(scores.channels):
        for L in scores.leads:
            rows.append((tag, name, L, "rmse", scores.rmse[L][ci]))
            if scores.polar:
                rows.append((
                    tag, name, L, f"rmse_polar{scores.polar_rows}",
                    scores.polar[L][ci],
                ))
    return rows


def _write_variant_csv(rows, first_column, path):
    lines = [f"{first_column},channel,lead_days,metric,value"]
    for tag, channel, lead, metric, value in rows:
        lines.append(f"{tag},{channel},{int(lead)},{metric},{float(value)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_ablate(cfg, out_dir):
    bundle = _load_bundle(cfg)
    _resolve_channels(cfg, bundle)
    leads = _validated_leads(cfg, "ablate.leads")
    polar_rows = cfg["ablate.polar_rows"]
    if polar_rows < 1:
        raise CliError(f"ablate.polar_rows must be positive, got {polar_rows}")
    _write_resolved(cfg, out_dir)
    tcfg = _train_config(cfg)
    weights = _loss_weights(cfg, bundle)
    base = _model_config(cfg)
    pairs = FileSource(bundle.train, bundle.stats).pairs()

    variants = list(ABLATION_VARIANTS)
    if cfg["ablate.include_circular"]:
        variants.append(("circular_senet", "circular_zero_pole", True))

    def train_and_score(config):
        model = build(config, seed=cfg["seed"])
        train(model, pairs, tcfg, loss_weights=weights)
        return _score_forecasts(
            bundle, leads, "checkpoint", model=model,
            static_reset=True, weighted=True, polar_rows=polar_rows,
        )

    rows = []
    day3 = {}
    for tag, padding_mode, se_enabled in variants:
        try:
            config = replace(base, padding_mode=padding_mode,
                             se_enabled=se_enabled).validate()
        except ModelError as err:
            raise CliError(str(err)) from err
        scores = train_and_score(config)
        rows.extend(_variant_rows(tag, scores))
        probe = 3 if 3 in leads else leads[0]
        day3[tag] = float(scores.rmse[probe][0])
    _write_variant_csv(rows, "variant", os.path.join(out_dir, "ablation.csv"))

    if cfg["ablate.kernel_sweep"]:
        sweep_rows = []
        for k in (3, 5, 7):
            config = replace(base, stem_kernel=k, padding_mode="geocyclic",
                             se_enabled=True).validate()
            scores = train_and_score(config)
            sweep_rows.extend(_variant_rows(str(k), scores))
        _write_variant_csv(sweep_rows, "kernel",
                           os.path.join(out_dir, "kernel_sweep.csv"))

    ordering = " ".join(f"{tag}={day3[tag]:.6g}" for tag, _, _ in variants)
    print(f"ablation over {len(variants)} variants, {tcfg.epochs} epochs each; "
          f"first-channel rmse: {ordering}")
    return 0


# ---------------------------------------------------------------------------
# entry point

COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "rollout": cmd_rollout,
    "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="karina", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    return parser


def main(argv=None):
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        cfg = load_config(args.config, args.set, args.seed)
    except CliError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    try:
        return COMMANDS[args.command](cfg, out_dir)
    except CliError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - boundary: report, flag, exit 2
        with open(os.path.join(out_dir, "FAILED"), "w", encoding="utf-8") as fh:
            fh.write(f"{err}\n")
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
