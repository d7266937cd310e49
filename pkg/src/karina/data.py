"""Gridded file I/O, z-score normalization, lag augmentation, and a
synthetic spherical-advection generator.

The generator moves Gaussian blobs by solid-body rotation about an axis
tilted away from the planetary axis.  Tilt 0 gives zonal flow; tilt 90
drives every blob straight across both poles, which is the regime that
separates sphere-aware padding from flat alternatives.  Fields are
analytic in time, so sub-daily lag offsets are sampled exactly rather
than interpolated.

Two exactness properties are load-bearing and intentional:
  - with tilt 0 and speeds that are integer multiples of the grid
    spacing per day, advected channels at day k are bit-identical to
    day 0 rolled along longitude (blob azimuths are snapped to 1/16
    degree and the azimuth difference is reduced mod 360 before any
    transcendental, so equal angles have equal bits);
  - the lag-0 analytic view normalizes to the same float32 values as
    the stored daily file, so a degenerate fine-tune phase reproduces
    plain training exactly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from karina.padding import GridSpec

GRID_MAGIC = b"GFLD"
GRID_VERSION = 1
YEAR_DAYS = 365.25


class DataError(Exception):
    """Malformed file, bad spec, or an unsatisfiable request."""


# ---------------------------------------------------------------------------
# gridded container


@dataclass
class GridFile:
    """In-memory gridded series: (time, channel, lat, lon) float32."""

    channels: tuple
    dates: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.channels = tuple(str(c) for c in self.channels)
        if len(set(self.channels)) != len(self.channels):
            raise DataError("channel names must be unique")
        if any(not c for c in self.channels):
            raise DataError("channel names must be nonempty")
        self.dates = np.asarray(self.dates, dtype=np.uint32)
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 4:
            raise DataError(f"values must be (time, channel, lat, lon), got shape {self.values.shape}")
        t, c, h, w = self.values.shape
        if t < 1 or c < 1 or h < 1 or w < 1:
            raise DataError(f"degenerate extent in {self.values.shape}")
        if c != len(self.channels):
            raise DataError(f"{len(self.channels)} channel names for {c} channels")
        if self.dates.shape != (t,):
            raise DataError(f"{self.dates.shape[0] if self.dates.ndim else 0} dates for {t} records")
        if t > 1 and not np.all(np.diff(self.dates.astype(np.int64)) > 0):
            raise DataError("dates must be strictly increasing")

    @property
    def n_time(self):
        return self.values.shape[0]

    @property
    def grid(self):
        return GridSpec.from_shape(self.values.shape[2], self.values.shape[3])

    def channel_index(self, name):
        try:
            return self.channels.index(name)
        except ValueError:
            raise DataError(f"no channel named {name!r}") from None


def grid_file_size(gf):
    """Exact on-disk byte count for the binary layout."""
    t, c, h, w = gf.values.shape
    names = sum(4 + len(name.encode("utf-8")) for name in gf.channels)
    return 4 + 4 + 16 + 4 * t + names + 4 * t * c * h * w


def write_grid(gf, path):
    t, c, h, w = gf.values.shape
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<IIIII", GRID_VERSION, t, c, h, w))
        fh.write(gf.dates.astype("<u4").tobytes())
        for name in gf.channels:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(gf.values.astype("<f4").tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(fmt, offset):
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise DataError(
                f"truncated file: expected at least {offset + size} bytes, got {len(blob)}"
            )
        return struct.unpack_from(fmt, blob, offset), offset + size

    if blob[:4] != GRID_MAGIC:
        raise DataError(f"bad magic {blob[:4]!r}")
    (version, t, c, h, w), off = take("<IIIII", 4)
    if version != GRID_VERSION:
        raise DataError(f"unsupported version {version}")
    (dates), off = take(f"<{t}I", off)
    names = []
    for _ in range(c):
        (n,), off = take("<I", off)
        if off + n > len(blob):
            raise DataError(
                f"truncated file: expected at least {off + n} bytes, got {len(blob)}"
            )
        names.append(blob[off:off + n].decode("utf-8"))
        off += n
    count = t * c * h * w
    want = off + 4 * count
    if len(blob) < want:
        raise DataError(f"truncated file: expected {want} bytes, got {len(blob)}")
    if len(blob) > want:
        raise DataError(f"trailing bytes: expected {want} bytes, got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
    return GridFile(
        channels=tuple(names),
        dates=np.asarray(dates, dtype=np.uint32),
        values=values.reshape(t, c, h, w).copy(),
    )


# ---------------------------------------------------------------------------
# z-score normalization


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and std from the training period.

    Constant channels are flagged and get std 1, with the mean set to
    the exact constant so their normalized values are exactly zero.
    """

    channels: tuple
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise DataError("stats std must be positive")

    def state_bytes(self):
        """Hashable snapshot for split-hygiene assertions."""
        return self.mean.tobytes() + self.std.tobytes() + self.constant.tobytes()


def compute_norm_stats(gf):
    vals = gf.values
    if not np.isfinite(vals).all():
        raise DataError("training data contains non-finite values")
    flat = vals.transpose(1, 0, 2, 3).reshape(vals.shape[1], -1).astype(np.float64)
    lo = flat.min(axis=1)
    hi = flat.max(axis=1)
    constant = lo == hi
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    mean[constant] = lo[constant]
    std[constant] = 1.0
    return NormStats(channels=gf.channels, mean=mean, std=std, constant=constant)


def static_channel_mask(gf):
    """Channels whose field never changes across time (boundary
    conditions such as orography).  Distinct from the NormStats
    constant flag, which marks channels constant across time AND space."""
    if gf.n_time == 1:
        return np.ones(len(gf.channels), dtype=bool)
    return np.array([
        bool((gf.values[:, c] == gf.values[0, c]).all())
        for c in range(len(gf.channels))
    ])


def _check_channels(values, stats):
    if values.shape[-3] != len(stats.channels):
        raise DataError(
            f"{values.shape[-3]} channels in data, stats cover {len(stats.channels)}"
        )


def normalize(values, stats):
    """(x - mean) / std per channel, in the array's own dtype."""
    values = np.asarray(values)
    _check_channels(values, stats)
    mu = stats.mean.astype(values.dtype)[:, None, None]
    sd = stats.std.astype(values.dtype)[:, None, None]
    return (values - mu) / sd


def denormalize(values, stats):
    values = np.asarray(values)
    _check_channels(values, stats)
    mu = stats.mean.astype(values.dtype)[:, None, None]
    sd = stats.std.astype(values.dtype)[:, None, None]
    return values * sd + mu


# ---------------------------------------------------------------------------
# synthetic spherical advection


@dataclass(frozen=True)
class SyntheticSpec:
    n_days: int = 360
    seed: int = 0
    n_blob_channels: int = 2
    tilt_deg: float = 0.0
    speed_deg_per_day: float = 15.0
    blob_width_deg: float = 20.0
    noise: float = 0.0
    n_lat: int = 24
    n_lon: int = 48
    start_day: int = 0

    def validate(self):
        if self.n_days < 1:
            raise DataError(f"n_days must be at least 1, got {self.n_days}")
        if self.n_blob_channels < 1:
            raise DataError(f"need at least one advected channel, got {self.n_blob_channels}")
        if self.n_blob_channels > 99:
            raise DataError("at most 99 advected channels supported")
        if self.speed_deg_per_day == 0:
            raise DataError("speed must be nonzero")
        if not 0.0 <= self.tilt_deg <= 90.0:
            raise DataError(f"tilt must sit in [0, 90] degrees, got {self.tilt_deg}")
        if self.blob_width_deg <= 0:
            raise DataError(f"blob width must be positive, got {self.blob_width_deg}")
        if self.noise < 0:
            raise DataError(f"noise amplitude must be nonnegative, got {self.noise}")
        if self.start_day < 0:
            raise DataError(f"start_day must be nonnegative, got {self.start_day}")
        return self

    @property
    def channels(self):
        names = [f"TR{k + 1:02d}" for k in range(self.n_blob_channels)]
        return tuple(names) + ("SEAS", "OROG")


BLOBS_PER_CHANNEL = 2
NOISE_MODES = 6
SEAS_COEFFS = ((1.2, 0.5), (0.4, -0.3))  # (cos, sin) amplitude per harmonic


def _dyadic_degrees(x):
    # snap to 1/16 degree so azimuth arithmetic stays exact in binary
    return np.round(np.asarray(x, dtype=np.float64) * 16.0) / 16.0


class SyntheticField:
    """Analytic field set: evaluates any real day offset exactly once."""

    def __init__(self, spec):
        self.spec = spec.validate()
        self.grid = GridSpec.from_shape(spec.n_lat, spec.n_lon)
        h, w = spec.n_lat, spec.n_lon
        lat = 90.0 - 180.0 * (np.arange(h, dtype=np.float64) + 0.5) / h
        lon = np.arange(w, dtype=np.float64) * (360.0 / w)

        tau = math.radians(spec.tilt_deg)
        if spec.tilt_deg == 0.0:
            # axis frame is the earth frame; keep row/col angles exact
            self._alpha = np.broadcast_to((90.0 - lat)[:, None], (h, w)).copy()
            self._beta = np.broadcast_to(lon[None, :], (h, w)).copy()
        else:
            phi = np.deg2rad(lat)[:, None]
            lam = np.deg2rad(lon)[None, :]
            x = np.cos(phi) * np.cos(lam)
            y = np.cos(phi) * np.sin(lam) + 0.0 * x
            z = np.sin(phi) + 0.0 * x
            xa = math.cos(tau) * x - math.sin(tau) * z
            za = math.sin(tau) * x + math.cos(tau) * z
            self._alpha = np.rad2deg(np.arccos(np.clip(za, -1.0, 1.0)))
            self._beta = np.rad2deg(np.arctan2(y, xa)) % 360.0
        self._cos_alpha = np.cos(np.deg2rad(self._alpha))
        self._sin_alpha = np.sin(np.deg2rad(self._alpha))

        n_blob = spec.n_blob_channels
        rng = np.random.default_rng([spec.seed, 3])
        total = n_blob * BLOBS_PER_CHANNEL
        self._blob_alpha = rng.uniform(35.0, 145.0, total)
        self._blob_beta0 = _dyadic_degrees(rng.uniform(0.0, 360.0, total))
        self._blob_amp = rng.uniform(0.8, 1.6, total)
        self._blob_width = spec.blob_width_deg * rng.uniform(0.8, 1.25, total)
        # first blob rides the rotation great circle so that with tilt 90
        # it passes through both poles; it is also the strongest blob, so
        # the field maximum tracks its trajectory
        self._blob_alpha[0] = 90.0
        self._blob_beta0[0] = 0.0
        self._blob_amp[0] = 1.8
        self._blob_width[0] = spec.blob_width_deg

        noise_rng = np.random.default_rng([spec.seed, 17])
        g = noise_rng.standard_normal((n_blob, NOISE_MODES, h, w))
        row_w = self.grid.row_weights[:, None]
        g -= (row_w * g).sum(axis=(-2, -1), keepdims=True) / (h * w)
        self._noise_patterns = g
        self._noise_freq = noise_rng.uniform(0.3, 2.5, NOISE_MODES)
        self._noise_phase = noise_rng.uniform(0.0, 2.0 * math.pi, (n_blob, NOISE_MODES))

        osc_lat = np.deg2rad(lat)[:, None]
        osc_lon = np.deg2rad(lon)[None, :]
        self._orog = (
            0.9 * np.cos(osc_lat) ** 2 * np.sin(2.0 * osc_lon)
            + 0.5 * np.cos(osc_lat) * np.cos(osc_lon + 1.0)
            + 0.3 * np.sin(osc_lat) ** 2
        )

    @property
    def channels(self):
        return self.spec.channels

    def _blob_field(self, channel, t):
        spec = self.spec
        out = np.zeros((spec.n_lat, spec.n_lon))
        base = channel * BLOBS_PER_CHANNEL
        for b in range(base, base + BLOBS_PER_CHANNEL):
            beta_c = self._blob_beta0[b] + spec.speed_deg_per_day * t
            dbeta = np.mod(self._beta - beta_c, 360.0)
            alpha_c = math.radians(self._blob_alpha[b])
            cos_g = (
                self._cos_alpha * math.cos(alpha_c)
                + self._sin_alpha * math.sin(alpha_c) * np.cos(np.deg2rad(dbeta))
            )
            gamma = np.rad2deg(np.arccos(np.clip(cos_g, -1.0, 1.0)))
            out += self._blob_amp[b] * np.exp(-0.5 * (gamma / self._blob_width[b]) ** 2)
        if spec.noise:
            modes = np.cos(
                self._noise_freq[:, None, None] * t
                + self._noise_phase[channel][:, None, None]
            )
            out += spec.noise * (self._noise_patterns[channel] * modes).sum(axis=0)
        return out

    def seasonal_value(self, t):
        doy = (self.spec.start_day + t) % YEAR_DAYS
        total = 0.0
        for k, (a, b) in enumerate(SEAS_COEFFS, start=1):
            ang = 2.0 * math.pi * k * doy / YEAR_DAYS
            total += a * math.cos(ang) + b * math.sin(ang)
        return total

    def frame(self, t):
        """All channels at day offset t (fractional days allowed), float64."""
        spec = self.spec
        out = np.empty((len(self.channels), spec.n_lat, spec.n_lon))
        for c in range(spec.n_blob_channels):
            out[c] = self._blob_field(c, float(t))
        out[spec.n_blob_channels] = self.seasonal_value(float(t))
        out[spec.n_blob_channels + 1] = self._orog
        return out

    def frames(self, offsets):
        return np.stack([self.frame(t) for t in offsets])


def generate_synthetic(spec):
    """Daily GridFile sampled from the analytic fields."""
    field_set = SyntheticField(spec)
    values = field_set.frames(np.arange(spec.n_days)).astype(np.float32)
    dates = spec.start_day + np.arange(spec.n_days, dtype=np.uint32)
    return GridFile(channels=field_set.channels, dates=dates, values=values)


# ---------------------------------------------------------------------------
# training pairs and lag augmentation


@dataclass
class PairSet:
    """Aligned (input, target) arrays in normalized space."""

    x: np.ndarray
    y: np.ndarray
    input_dates: np.ndarray | None = None

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise DataError(f"pair arrays disagree: {self.x.shape} vs {self.y.shape}")


def _validated_lags(lags):
    lags = tuple(int(l) for l in lags)
    if not lags:
        raise DataError("need at least one lag")
    if len(set(lags)) != len(lags):
        raise DataError(f"lags must be unique, got {lags}")
    if any(not 0 <= l <= 23 for l in lags):
        raise DataError(f"lags must sit in [0, 23] hours, got {lags}")
    return lags


def _check_lead(lead, n_time):
    if lead < 1:
        raise DataError(f"lead must be at least 1 day, got {lead}")
    if lead >= n_time:
        raise DataError(f"lead {lead} needs more than {n_time} records")


class FileSource:
    """Pairs from a stored daily file; only lag 0 is realizable."""

    def __init__(self, grid_file, stats, lead=1):
        _check_lead(lead, grid_file.n_time)
        self.grid_file = grid_file
        self.stats = stats
        self.lead = lead

    def pairs(self):
        z = normalize(self.grid_file.values, self.stats)
        lead = self.lead
        return PairSet(
            x=z[:-lead].copy(),
            y=z[lead:].copy(),
            input_dates=self.grid_file.dates[:-lead].copy(),
        )

    def lag_pairs(self, lag_set):
        lags = _validated_lags(lag_set)
        bad = [l for l in lags if l != 0]
        if bad:
            raise DataError(
                f"lag {bad[0]} unavailable: the file holds daily records only"
            )
        return self.pairs()


class SyntheticSource:
    """Pairs from the analytic generator; any hour lag is exact.

    Frames are cast to float32 before normalization, matching the
    stored file, so lag 0 reproduces FileSource.pairs() bit for bit.
    """

    def __init__(self, field_set, stats, lead=1):
        _check_lead(lead, field_set.spec.n_days)
        self.field_set = field_set
        self.stats = stats
        self.lead = lead

    def _normalized_frame(self, t):
        raw = self.field_set.frame(t).astype(np.float32)
        return normalize(raw, self.stats)

    def pairs(self):
        return self.lag_pairs((0,))

    def lag_pairs(self, lag_set):
        lags = _validated_lags(lag_set)
        spec = self.field_set.spec
        n = spec.n_days - self.lead
        xs, ys, dates = [], [], []
        for lag in lags:
            offset = lag / 24.0
            for k in range(n):
                xs.append(self._normalized_frame(k + offset))
                ys.append(self._normalized_frame(k + self.lead + offset))
                dates.append(spec.start_day + k)
        return PairSet(
            x=np.stack(xs),
            y=np.stack(ys),
            input_dates=np.asarray(dates, dtype=np.uint32),
        )


def lag_augment(source, lags):
    """Augmented pair set over the given hour offsets; the source
    decides which lags it can realize."""
    return source.lag_pairs(_validated_lags(lags))
