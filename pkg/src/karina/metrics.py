"""Verification metrics on latitude-longitude grids.

Scores are latitude-weighted by default: each row is weighted by the
cosine of its center latitude, normalized so the weights average to 1
over rows.  An unweighted mode is kept for comparison against the plain
formulas.

Anomaly correlation scores against a harmonic climatology: per grid
point, a mean plus the first few annual harmonics fitted by least
squares on a training series.  Correlating a field with itself scores
exactly 1.0: both anomaly reductions run the same code path, so the
numerator and the two variances are the same float, and sqrt(v*v) == v
in round-to-nearest for any normal v.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from karina.padding import GridSpec


PERIOD_DAYS = 365.25


class MetricsError(Exception):
    """Invalid metric input or an undefined score."""


def latitude_weights(grid):
    """Per-row weights cos(lat) / mean(cos(lat)); they average to 1."""
    cos = np.cos(np.deg2rad(np.asarray(grid.lat_centers, dtype=np.float64)))
    return cos / cos.mean()


def _as_channels(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None], True
    if a.ndim == 3:
        return a, False
    raise MetricsError(f"expected a (lat, lon) or (channel, lat, lon) field, got shape {a.shape}")


def _require_finite(a, label):
    bad = ~np.isfinite(a)
    if bad.any():
        c, i, j = np.argwhere(bad)[0]
        raise MetricsError(f"{label} is not finite at channel {c}, row {i}, col {j}")


@dataclass(frozen=True)
class MetricSample:
    """One scored (forecast, truth) pair on a grid."""

    forecast: np.ndarray
    truth: np.ndarray
    grid: GridSpec
    valid_date: float = 0.0
    lead_days: int = 0

    def __post_init__(self):
        f, _ = _as_channels(self.forecast)
        t, _ = _as_channels(self.truth)
        if f.shape != t.shape:
            raise MetricsError(f"forecast {f.shape} and truth {t.shape} disagree")
        if f.shape[-2:] != (self.grid.n_lat, self.grid.n_lon):
            raise MetricsError(
                f"fields {f.shape[-2:]} do not match grid "
                f"({self.grid.n_lat}, {self.grid.n_lon})"
            )


def weighted_rmse(sample, weighted=True):
    """Root mean square error per channel, rows weighted by cos(lat).

    Returns a scalar for 2-D fields, a (channel,) vector otherwise.
    """
    f, squeeze = _as_channels(sample.forecast)
    t, _ = _as_channels(sample.truth)
    _require_finite(f, "forecast")
    _require_finite(t, "truth")
    if weighted:
        w = latitude_weights(sample.grid)[None, :, None]
    else:
        w = np.ones((1, 1, 1))
    d = f - t
    ms = (w * d * d).sum(axis=(-2, -1)) / (f.shape[-2] * f.shape[-1])
    out = np.sqrt(ms)
    return float(out[0]) if squeeze else out


@dataclass
class ClimatologyTable:
    """Per-point annual cycle: mean plus harmonic pairs.

    coeffs has shape (1 + 2*n_harmonics, channel, lat, lon) ordered
    [a0, a1, b1, a2, b2, ...]; evaluate() reconstructs the cycle at a
    fractional day-of-year.
    """

    coeffs: np.ndarray
    n_harmonics: int
    fit_start: float
    fit_end: float
    period: float = PERIOD_DAYS

    def evaluate(self, date):
        doy = float(date) % self.period
        out = self.coeffs[0].copy()
        for k in range(1, self.n_harmonics + 1):
            ang = 2.0 * math.pi * k * doy / self.period
            out += self.coeffs[2 * k - 1] * math.cos(ang)
            out += self.coeffs[2 * k] * math.sin(ang)
        return out


def harmonic_design(dates, n_harmonics, period=PERIOD_DAYS):
    """Design matrix [1, cos(k*omega*doy), sin(k*omega*doy)] per date."""
    doy = np.mod(np.asarray(dates, dtype=np.float64), period)
    cols = [np.ones_like(doy)]
    for k in range(1, n_harmonics + 1):
        ang = 2.0 * np.pi * k * doy / period
        cols.append(np.cos(ang))
        cols.append(np.sin(ang))
    return np.stack(cols, axis=1)


def fit_climatology(series, dates, n_harmonics=3):
    """Least-squares harmonic fit of the annual cycle, per grid point.

    series is (time, channel, lat, lon) or (time, lat, lon); dates are
    day numbers on any epoch.  Requires the dates to span at least two
    full annual cycles so the harmonics are identifiable.
    """
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 3:
        series = series[:, None]
    if series.ndim != 4:
        raise MetricsError(f"expected a (time, channel, lat, lon) series, got shape {series.shape}")
    dates = np.asarray(dates, dtype=np.float64)
    if dates.shape != (series.shape[0],):
        raise MetricsError(f"{dates.shape[0] if dates.ndim else 0} dates for {series.shape[0]} fields")
    if not np.isfinite(series).all():
        raise MetricsError("series contains non-finite values")
    span = float(dates.max() - dates.min()) + 1.0
    if span < 2.0 * PERIOD_DAYS:
        raise MetricsError(
            f"need at least two full annual cycles, got {span:.1f} days of coverage"
        )
    a = harmonic_design(dates, n_harmonics)
    t, c, h, w = series.shape
    flat = series.reshape(t, c * h * w)
    coeffs, _, rank, _ = np.linalg.lstsq(a, flat, rcond=None)
    if rank < a.shape[1]:
        raise MetricsError("harmonic fit is rank deficient; dates sample the cycle too sparsely")
    return ClimatologyTable(
        coeffs=coeffs.reshape(1 + 2 * n_harmonics, c, h, w),
        n_harmonics=n_harmonics,
        fit_start=float(dates.min()),
        fit_end=float(dates.max()),
    )


def _weighted_spatial_stats(anom, w):
    # mean and centered field under row weights that average to 1
    n = anom.shape[-2] * anom.shape[-1]
    mean = (w * anom).sum(axis=(-2, -1), keepdims=True) / n
    centered = anom - mean
    var = (w * centered * centered).sum(axis=(-2, -1)) / n
    return centered, var


def acc(sample, clim, weighted=True):
    """Anomaly correlation against the harmonic climatology.

    Anomalies are deviations from clim at the sample's valid date; the
    spatial means removed inside the correlation are latitude-weighted.
    Scalar for 2-D fields, per-channel vector otherwise.
    """
    f, squeeze = _as_channels(sample.forecast)
    t, _ = _as_channels(sample.truth)
    _require_finite(f, "forecast")
    _require_finite(t, "truth")
    ref = clim.evaluate(sample.valid_date)
    if ref.ndim == 2:
        ref = ref[None]
    if ref.shape != f.shape:
        raise MetricsError(f"climatology {ref.shape} does not cover fields {f.shape}")
    if weighted:
        w = latitude_weights(sample.grid)[None, :, None]
    else:
        w = np.ones((1, 1, 1))
    fc, fv = _weighted_spatial_stats(f - ref, w)
    tc, tv = _weighted_spatial_stats(t - ref, w)
    if np.any(fv <= 0) or np.any(tv <= 0):
        raise MetricsError("zero anomaly variance; correlation undefined")
    n = f.shape[-2] * f.shape[-1]
    num = (w * fc * tc).sum(axis=(-2, -1)) / n
    out = num / np.sqrt(fv * tv)
    return float(out[0]) if squeeze else out


def regression_map(z_members, x_members, negate=False):
    """Member-regression field: covariance of each point with a scalar
    index, normalized by the index standard deviation.

    z_members is (member,), x_members is (member, ...field).  With
    negate=True the map is reported for a one-sigma displacement in the
    negative direction.
    """
    z = np.asarray(z_members, dtype=np.float64)
    x = np.asarray(x_members, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise MetricsError("need at least two members")
    if x.shape[0] != z.shape[0]:
        raise MetricsError(f"{x.shape[0]} member fields for {z.shape[0]} index values")
    dz = z - z.mean()
    denom = math.sqrt(float((dz * dz).sum()))
    if denom == 0.0:
        raise MetricsError("index has zero variance across members")
    dx = x - x.mean(axis=0)
    r = np.tensordot(dz, dx, axes=(0, 0)) / denom
    return -r if negate else r


@dataclass(frozen=True)
class Box:
    """Geographic box; longitudes may be given in [-180, 360) and may
    wrap across the 0 meridian.  Bounds are inclusive of cell centers."""

    lon_west: float
    lon_east: float
    lat_south: float
    lat_north: float

    def __post_init__(self):
        if self.lat_south > self.lat_north:
            raise MetricsError(
                f"box latitudes out of order: {self.lat_south} > {self.lat_north}"
            )

    def lon_mask(self, lon_centers):
        west = self.lon_west % 360.0
        east = self.lon_east % 360.0
        lon = np.asarray(lon_centers, dtype=np.float64) % 360.0
        if west <= east:
            return (lon >= west) & (lon <= east)
        return (lon >= west) | (lon <= east)

    def lat_mask(self, lat_centers):
        lat = np.asarray(lat_centers, dtype=np.float64)
        return (lat >= self.lat_south) & (lat <= self.lat_north)


NORTH_ATLANTIC_BOX = Box(lon_west=-40.0, lon_east=-10.0, lat_south=30.0, lat_north=45.0)


def area_average(field, box, grid):
    """Latitude-weighted mean over cells whose centers fall in the box."""
    f, squeeze = _as_channels(field)
    if f.shape[-2:] != (grid.n_lat, grid.n_lon):
        raise MetricsError(
            f"field {f.shape[-2:]} does not match grid ({grid.n_lat}, {grid.n_lon})"
        )
    rows = box.lat_mask(grid.lat_centers)
    cols = box.lon_mask(grid.lon_centers)
    if not rows.any() or not cols.any():
        raise MetricsError("box does not intersect the grid")
    w = latitude_weights(grid)[rows][:, None] * np.ones(int(cols.sum()))[None, :]
    sub = f[:, rows][:, :, cols]
    out = (w * sub).sum(axis=(-2, -1)) / w.sum()
    return float(out[0]) if squeeze else out


def metrics_to_csv(rows, path):
    """rows of (channel, lead_days, metric, value) -> deterministic CSV."""
    lines = ["channel,lead_days,metric,value"]
    for channel, lead, name, value in rows:
        lines.append(f"{channel},{int(lead)},{name},{float(value)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
