"""Latitude-longitude grids, latitude weights and interpolation baselines.

Grids are pole-inclusive in latitude (``-90 .. 90``) and half-open in
longitude (``[-180, 180)``), so a refinement by an integer factor keeps
every coarse node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GridMismatchError

_SNAP = 1e-9  # fractional-index snapping so exact nodes hit weights (1, 0)


@dataclass(frozen=True)
class LatLonGrid:
    """Uniform pole-to-pole grid with ``n_lat`` rows and ``n_lon`` columns."""

    n_lat: int
    n_lon: int
    lats: np.ndarray = field(init=False, repr=False, compare=False)
    lons: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_lat < 2 or self.n_lon < 2:
            raise DimensionError(
                f"grid needs n_lat >= 2 and n_lon >= 2, got {self.n_lat}x{self.n_lon}"
            )
        k = np.arange(self.n_lat, dtype=np.float64)
        m = np.arange(self.n_lon, dtype=np.float64)
        # (180*k)/(n-1) is a correctly rounded quotient, so nodes shared by
        # two grids get bit-identical coordinates.
        lats = -90.0 + (180.0 * k) / (self.n_lat - 1)
        lats[-1] = 90.0
        lons = -180.0 + (360.0 * m) / self.n_lon
        lats.setflags(write=False)
        lons.setflags(write=False)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lons", lons)

    @property
    def dlat(self) -> float:
        return 180.0 / (self.n_lat - 1)

    @property
    def dlon(self) -> float:
        return 360.0 / self.n_lon

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_lat, self.n_lon)

    @property
    def size(self) -> int:
        return self.n_lat * self.n_lon

    def nodes(self) -> np.ndarray:
        """Return ``(n_lat*n_lon, 2)`` array of (lat, lon) in row-major order."""
        la, lo = np.meshgrid(self.lats, self.lons, indexing="ij")
        return np.stack([la.ravel(), lo.ravel()], axis=1)

    def __str__(self) -> str:
        return f"{self.n_lat}x{self.n_lon}"


@dataclass
class FieldTensor:
    """Multi-variable field with ``values[var, lat, lon]``."""

    grid: LatLonGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[None]
        if values.shape[1:] != self.grid.shape:
            raise GridMismatchError(
                f"values shape {values.shape} does not match grid {self.grid}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains NaN or Inf")
        self.values = values

    @property
    def n_vars(self) -> int:
        return self.values.shape[0]


def build_grid(n_lat: int, n_lon: int) -> LatLonGrid:
    return LatLonGrid(int(n_lat), int(n_lon))


def refined_grid(grid: LatLonGrid, ratio: float) -> LatLonGrid:
    """Grid whose density is ``ratio`` times that of ``grid``.

    Node counts are rounded: ``round((n_lat-1)*r)+1`` rows and
    ``round(n_lon*r)`` columns, which keeps both poles and the periodic seam.
    """
    if ratio <= 0:
        raise ValueError(f"ratio must be positive, got {ratio}")
    n_lat = int(round((grid.n_lat - 1) * ratio)) + 1
    n_lon = int(round(grid.n_lon * ratio))
    return build_grid(max(n_lat, 2), max(n_lon, 2))


def latitude_weights(grid: LatLonGrid) -> np.ndarray:
    """Cosine-latitude weights; pole rows are exactly zero."""
    w = np.cos(np.radians(grid.lats))
    w[np.abs(grid.lats) == 90.0] = 0.0
    return np.maximum(w, 0.0)


def is_refinement(coarse: LatLonGrid, fine: LatLonGrid, tol: float = 1e-12) -> bool:
    """True iff every coarse node coordinate also appears on ``fine``."""

    def contained(a, b):
        idx = np.searchsorted(b, a)
        lo = np.abs(a - b[np.clip(idx - 1, 0, len(b) - 1)])
        hi = np.abs(a - b[np.clip(idx, 0, len(b) - 1)])
        return bool(np.all(np.minimum(lo, hi) <= tol))

    return contained(coarse.lats, fine.lats) and contained(coarse.lons, fine.lons)


def _lat_index(grid: LatLonGrid, lat: np.ndarray):
    t = (np.asarray(lat, dtype=np.float64) + 90.0) / grid.dlat
    r = np.round(t)
    t = np.where(np.abs(t - r) < _SNAP, r, t)
    return t


def _lon_index(grid: LatLonGrid, lon: np.ndarray):
    u = np.mod(np.asarray(lon, dtype=np.float64) + 180.0, 360.0) / grid.dlon
    r = np.round(u)
    u = np.where(np.abs(u - r) < _SNAP, r, u)
    return np.where(u >= grid.n_lon, u - grid.n_lon, u)


def bilinear_at(values: np.ndarray, grid: LatLonGrid, lat, lon) -> np.ndarray:
    """Bilinear samples of ``values[..., lat, lon]`` at scattered points.

    Longitude is periodic; ``lat`` must lie in ``[-90, 90]``.
    Returns an array of shape ``values.shape[:-2] + lat.shape``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-2:] != grid.shape:
        raise GridMismatchError(f"values {values.shape} vs grid {grid}")
    t = _lat_index(grid, lat)
    i0 = np.clip(np.floor(t).astype(np.int64), 0, grid.n_lat - 2)
    fy = t - i0
    u = _lon_index(grid, lon)
    j0 = np.floor(u).astype(np.int64) % grid.n_lon
    fx = u - np.floor(u)
    j1 = (j0 + 1) % grid.n_lon
    v00 = values[..., i0, j0]
    v01 = values[..., i0, j1]
    v10 = values[..., i0 + 1, j0]
    v11 = values[..., i0 + 1, j1]
    return (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    t2 = t * t
    t3 = t2 * t
    return np.stack(
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ]
    )


def bicubic_at(values: np.ndarray, grid: LatLonGrid, lat, lon) -> np.ndarray:
    """Separable Catmull-Rom samples; periodic in longitude, clamped in latitude."""
    if grid.n_lat < 4 or grid.n_lon < 4:
        raise DimensionError(f"bicubic needs a grid of at least 4x4, got {grid}")
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-2:] != grid.shape:
        raise GridMismatchError(f"values {values.shape} vs grid {grid}")
    t = _lat_index(grid, lat)
    i0 = np.clip(np.floor(t).astype(np.int64), 0, grid.n_lat - 2)
    wy = _catmull_rom(t - i0)
    u = _lon_index(grid, lon)
    j0 = np.floor(u).astype(np.int64)
    wx = _catmull_rom(u - j0)
    out = 0.0
    for a in range(4):
        ii = np.clip(i0 + a - 1, 0, grid.n_lat - 1)
        row = 0.0
        for b in range(4):
            jj = (j0 + b - 1) % grid.n_lon
            row = row + wx[b] * values[..., ii, jj]
        out = out + wy[a] * row
    return out


def _resample(field: FieldTensor, dst: LatLonGrid, sampler) -> FieldTensor:
    if not isinstance(field.grid, LatLonGrid) or field.values.shape[1:] != field.grid.shape:
        raise GridMismatchError("field does not carry a valid grid")
    la, lo = np.meshgrid(dst.lats, dst.lons, indexing="ij")
    return FieldTensor(dst, sampler(field.values, field.grid, la, lo))


def bilinear_interp(field: FieldTensor, dst: LatLonGrid) -> FieldTensor:
    return _resample(field, dst, bilinear_at)


def bicubic_interp(field: FieldTensor, dst: LatLonGrid) -> FieldTensor:
    return _resample(field, dst, bicubic_at)
