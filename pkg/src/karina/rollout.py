"""Autoregressive inference and stability diagnostics.

The model steps on its own output in normalized space; designated
static channels (orography and any other boundary fields) are reset to
their initial values after every step, so they never drift.  Stored
steps are denormalized; the final normalized state is kept on the
series so a continuation reproduces a longer run bit for bit.

A blowup tripwire stops the run on the first non-finite value or on a
normalized-space standard deviation above 100 in any channel; the
series returned is the finite prefix with the failing step recorded.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from karina import engine
from karina.data import DataError, GridFile, denormalize
from karina.metrics import latitude_weights
from karina.padding import GridSpec

BLOWUP_STD = 100.0


class RolloutError(Exception):
    """Bad rollout request."""


def model_fingerprint(model):
    """Stable hex id of the exact parameter values."""
    digest = hashlib.sha256()
    for p in model.parameters():
        digest.update(p.name.encode("utf-8"))
        digest.update(p.data.tobytes())
    return digest.hexdigest()[:16]


@dataclass
class ForecastSeries:
    init_date: float
    steps: np.ndarray              # (lead, channel, lat, lon), denormalized
    stats: object                  # NormStats used for denormalization
    channels: tuple
    checkpoint_id: str
    final_state: np.ndarray        # last normalized state, for chaining
    step_means: np.ndarray         # (lead, channel), normalized space
    step_stds: np.ndarray
    step_mins: np.ndarray
    step_maxs: np.ndarray
    blowup_step: int | None = None

    @property
    def horizon_done(self):
        return self.steps.shape[0]

    @property
    def grid(self):
        return GridSpec.from_shape(self.steps.shape[-2], self.steps.shape[-1])

    def to_grid_file(self):
        """One time entry per lead, dated init_date + lead."""
        if self.horizon_done == 0:
            raise RolloutError("series holds no completed steps")
        leads = np.arange(1, self.horizon_done + 1, dtype=np.uint32)
        return GridFile(
            channels=self.channels,
            dates=np.uint32(round(self.init_date)) + leads,
            values=self.steps.astype(np.float32),
        )


def _weighted_stats(state, w):
    # per-channel weighted mean/std plus raw extremes, float64
    x = state.astype(np.float64)
    n = x.shape[-2] * x.shape[-1]
    mean = (w * x).sum(axis=(-2, -1)) / n
    centered = x - mean[:, None, None]
    std = np.sqrt((w * centered * centered).sum(axis=(-2, -1)) / n)
    return mean, std, x.min(axis=(-2, -1)), x.max(axis=(-2, -1))


def rollout(model, init_state, horizon, stats, static_mask=None, init_date=0.0):
    """Step the model `horizon` times from a normalized initial state.

    init_state is (channel, lat, lon) in the model dtype; static_mask,
    when given, is a per-channel boolean array of channels to pin to
    their initial values after every step.
    """
    if horizon < 1:
        raise RolloutError(f"horizon must be at least 1, got {horizon}")
    init_state = np.asarray(init_state)
    if init_state.ndim != 3:
        raise RolloutError(f"initial state must be (channel, lat, lon), got shape {init_state.shape}")
    c = init_state.shape[0]
    if c != len(stats.channels):
        raise RolloutError(f"{c} state channels, stats cover {len(stats.channels)}")
    if static_mask is not None:
        static_mask = np.asarray(static_mask, dtype=bool)
        if static_mask.shape != (c,):
            raise RolloutError(f"static mask shape {static_mask.shape} does not cover {c} channels")
    if not np.isfinite(init_state).all():
        raise RolloutError("initial state contains non-finite values")

    grid = GridSpec.from_shape(init_state.shape[1], init_state.shape[2])
    w = latitude_weights(grid)[None, :, None]
    model.eval()

    steps = []
    means, stds, mins, maxs = [], [], [], []
    state = init_state.copy()
    blowup = None
    for k in range(horizon):
        try:
            out = model.forward(state[None])
        except engine.NonFiniteError:
            blowup = k + 1
            break
        nxt = out.data[0].copy()
        if static_mask is not None:
            nxt[static_mask] = init_state[static_mask]
        if not np.isfinite(nxt).all():
            blowup = k + 1
            break
        mean, std, lo, hi = _weighted_stats(nxt, w)
        if np.any(std > BLOWUP_STD):
            blowup = k + 1
            break
        state = nxt
        steps.append(denormalize(nxt, stats).astype(np.float32))
        means.append(mean)
        stds.append(std)
        mins.append(lo)
        maxs.append(hi)

    shape = (len(steps), c, init_state.shape[1], init_state.shape[2])
    return ForecastSeries(
        init_date=float(init_date),
        steps=np.array(steps, dtype=np.float32).reshape(shape),
        stats=stats,
        channels=tuple(stats.channels),
        checkpoint_id=model_fingerprint(model),
        final_state=state,
        step_means=np.array(means).reshape(len(steps), c),
        step_stds=np.array(stds).reshape(len(steps), c),
        step_mins=np.array(mins).reshape(len(steps), c),
        step_maxs=np.array(maxs).reshape(len(steps), c),
        blowup_step=blowup,
    )


def drift_rows(series):
    """(lead_days, channel, mean, std, min, max) per step per channel,
    in normalized space."""
    if series.horizon_done == 0:
        raise RolloutError("series holds no completed steps")
    rows = []
    for k in range(series.horizon_done):
        for c, name in enumerate(series.channels):
            rows.append((
                k + 1, name,
                float(series.step_means[k, c]), float(series.step_stds[k, c]),
                float(series.step_mins[k, c]), float(series.step_maxs[k, c]),
            ))
    return rows


def drift_report(series, path):
    """Deterministic per-step drift table."""
    lines = ["lead_days,channel,mean,std,min,max"]
    for lead, name, mean, std, lo, hi in drift_rows(series):
        lines.append(f"{lead},{name},{mean!r},{std!r},{lo!r},{hi!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
