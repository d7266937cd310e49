"""Boundary handling for fields on a regular latitude-longitude grid.

A global grid is periodic in longitude but not in latitude: walking off
a pole continues on the far side of the planet, half a revolution away
in longitude.  The geocyclic table encodes exactly that.  Padding is a
pure gather, so one int table per (H, W, p, mode) fully describes it
and the table doubles as the contract the tests check against.

Conventions: row 0 is the northernmost latitude band, rows increase
southward; column j holds longitude 360*j/W degrees east; position
(i, j) of the padded plane maps to interior coordinates r = i - p,
c = j - p.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from karina import engine


class PaddingError(Exception):
    """Invalid grid or padding request."""


class PaddingMode(enum.Enum):
    ZERO = "zero"
    CIRCULAR_ZERO_POLE = "circular_zero_pole"
    GEOCYCLIC = "geocyclic"

    @classmethod
    def parse(cls, text):
        for m in cls:
            if m.value == str(text):
                return m
        options = ", ".join(m.value for m in cls)
        raise PaddingError(f"unknown padding mode {text!r}, expected one of: {options}")


@dataclass(frozen=True)
class GridSpec:
    """Pole-free offset grid: cell centers straddle the equator, none sit on a pole."""

    n_lat: int
    n_lon: int
    lat_centers: np.ndarray = field(repr=False)
    lon_centers: np.ndarray = field(repr=False)
    row_weights: np.ndarray = field(repr=False)

    @classmethod
    def from_shape(cls, n_lat, n_lon):
        if n_lat < 1:
            raise PaddingError(f"n_lat must be positive, got {n_lat}")
        if n_lon < 2 or n_lon % 2:
            raise PaddingError(f"n_lon must be even and at least 2, got {n_lon}")
        j = np.arange(n_lat, dtype=np.float64)
        lat = 90.0 - 180.0 * (j + 0.5) / n_lat
        lon = 360.0 * np.arange(n_lon, dtype=np.float64) / n_lon
        cw = np.cos(np.deg2rad(lat))
        weights = cw / cw.mean()
        return cls(int(n_lat), int(n_lon), lat, lon, weights)

    def __post_init__(self):
        if self.lat_centers.shape != (self.n_lat,):
            raise PaddingError("lat_centers length disagrees with n_lat")
        if self.lon_centers.shape != (self.n_lon,):
            raise PaddingError("lon_centers length disagrees with n_lon")
        if not np.all(np.diff(self.lat_centers) < 0):
            raise PaddingError("lat_centers must decrease strictly from north to south")
        if np.any(np.abs(self.lat_centers) >= 90.0):
            raise PaddingError("lat_centers must lie strictly inside (-90, 90)")
        if np.any(self.row_weights <= 0):
            raise PaddingError("row weights must be positive")
        if abs(self.row_weights.mean() - 1.0) > 1e-12:
            raise PaddingError("row weights must average to one")

    @property
    def shape(self):
        return (self.n_lat, self.n_lon)


def _build_table(h, w, p, mode):
    """Flat source index per padded cell, -1 for zero fill.

    Pole reflection: pad line k of the north edge (k = 1 at the first
    line above the grid) re-reads interior row k - 1 shifted by half a
    revolution; the south edge mirrors that with row h - k.  Longitude
    wraps everywhere, so the corner blocks follow from the same rule.
    """
    table = np.full((h + 2 * p, w + 2 * p), -1, dtype=np.int64)
    half = w // 2 if w % 2 == 0 else 0
    for i in range(h + 2 * p):
        for j in range(w + 2 * p):
            if p <= i < p + h:
                r = i - p
                if mode is PaddingMode.ZERO:
                    if not (p <= j < p + w):
                        continue
                    c = j - p
                else:
                    c = (j - p) % w
            elif mode is PaddingMode.GEOCYCLIC:
                if i < p:
                    k = p - i
                    r = k - 1
                else:
                    k = i - (p + h) + 1
                    r = h - k
                c = (j - p + half) % w
            else:
                continue
            table[i, j] = r * w + c
    return table


_TABLE_CACHE = {}


def index_map(p, grid, mode):
    """Gather table for padding a (H, W) field by p cells on each side.

    grid is a GridSpec or a plain (H, W) tuple.  Entries hold the flat
    interior index feeding each padded cell, -1 where zeros go.  Tables
    are cached; treat them as read-only.
    """
    if isinstance(grid, GridSpec):
        h, w = grid.n_lat, grid.n_lon
    else:
        h, w = int(grid[0]), int(grid[1])
    mode = mode if isinstance(mode, PaddingMode) else PaddingMode.parse(mode)
    p = int(p)
    if p < 1:
        raise PaddingError(f"pad width must be at least 1, got {p}")
    if h < 1 or w < 1:
        raise PaddingError(f"grid extents must be positive, got ({h}, {w})")
    if mode is PaddingMode.GEOCYCLIC:
        if w % 2:
            raise PaddingError(f"geocyclic padding needs an even longitude count, got {w}")
        if p > h:
            raise PaddingError(f"pad width {p} exceeds latitude extent {h}")
    key = (h, w, p, mode)
    if key not in _TABLE_CACHE:
        table = _build_table(h, w, p, mode)
        table.setflags(write=False)
        _TABLE_CACHE[key] = table
    return _TABLE_CACHE[key]


def _pad(x, p, mode):
    if x.data.ndim not in (3, 4):
        raise PaddingError(f"padding expects (C,H,W) or (B,C,H,W), got {x.data.shape}")
    h, w = x.data.shape[-2:]
    table = index_map(p, (h, w), mode)
    return engine.pad2d(x, table, table.shape)


def pad_geocyclic(x, p):
    """Pad with longitude wrap and antipodal pole reflection."""
    return _pad(x, p, PaddingMode.GEOCYCLIC)


def pad_circular_zero_pole(x, p):
    """Pad with longitude wrap; rows beyond either pole read zero."""
    return _pad(x, p, PaddingMode.CIRCULAR_ZERO_POLE)


def pad_zero(x, p):
    """Pad with zeros on all four sides."""
    return _pad(x, p, PaddingMode.ZERO)


def pad(x, p, mode):
    return _pad(x, p, mode)


def roll_lon(a, s):
    """Shift a field s cells eastward along the last axis, wrapping."""
    return np.roll(a, s, axis=-1)


def roll_lon_padded(a, s, p):
    """Roll only the W interior columns of a padded plane by s, wrapping.

    The p guard columns on each side are re-gathered from the rolled
    interior the same way the pad op built them, i.e. this is what
    padding a rolled field would produce if the pad were rebuilt, for
    the longitude-wrap part of the table.  Used by equivariance checks.
    """
    w = a.shape[-1] - 2 * p
    if w < 1:
        raise PaddingError(f"padded width {a.shape[-1]} too small for pad {p}")
    j = np.arange(a.shape[-1])
    src = p + (j - p - s) % w
    return a[..., src]
