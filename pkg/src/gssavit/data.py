"""GSF gridded-field files, synthetic fields, and min-max normalization.

GSF layout (all little-endian)::

    b"GSF1"  u32 version  u32 n_time  u32 n_vars  u32 n_lat  u32 n_lon
    n_vars x (u32 byte length, UTF-8 name)
    f64[n_lat] latitudes   f64[n_lon] longitudes
    f32[n_time][n_vars][n_lat][n_lon] data
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConstantVariableError,
    FormatError,
    SizeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from .grid import FieldTensor, LatLonGrid, bilinear_interp, build_grid

GSF_MAGIC = b"GSF1"
GSF_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class GsfFile:
    names: list
    lats: np.ndarray
    lons: np.ndarray
    data: np.ndarray  # float32 (time, var, lat, lon)
    version: int = GSF_VERSION

    @property
    def n_time(self) -> int:
        return self.data.shape[0]

    @property
    def n_vars(self) -> int:
        return self.data.shape[1]

    @property
    def grid(self) -> LatLonGrid:
        g = build_grid(len(self.lats), len(self.lons))
        if not (np.allclose(g.lats, self.lats, rtol=0, atol=1e-9) and np.allclose(g.lons, self.lons, rtol=0, atol=1e-9)):
            raise FormatError("coordinates are not a uniform pole-to-pole lat-lon grid")
        return g

    def field(self, t: int) -> FieldTensor:
        return FieldTensor(self.grid, self.data[t].astype(np.float64))


def write_gsf(path, data, grid: LatLonGrid, names: Optional[Sequence[str]] = None) -> None:
    """Write a ``(time, var, lat, lon)`` stack; data is stored as float32."""
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    t, v, h, w = data.shape
    if (h, w) != grid.shape:
        raise SizeMismatchError(f"data grid {(h, w)} does not match {grid}")
    names = list(names) if names is not None else [f"var{i}" for i in range(v)]
    if len(names) != v:
        raise SizeMismatchError(f"{len(names)} names for {v} variables")
    parts = [_HEADER.pack(GSF_MAGIC, GSF_VERSION, t, v, h, w)]
    for n in names:
        b = n.encode("utf-8")
        parts.append(struct.pack("<I", len(b)) + b)
    parts.append(np.asarray(grid.lats, dtype="<f8").tobytes())
    parts.append(np.asarray(grid.lons, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_gsf(path) -> GsfFile:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != GSF_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r}, expected {GSF_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header needs {_HEADER.size} bytes, file has {len(buf)}")
    _, version, t, v, h, w = _HEADER.unpack_from(buf)
    if version != GSF_VERSION:
        raise UnsupportedVersionError(f"{path}: GSF version {version} not supported")
    off = _HEADER.size
    names = []
    for _ in range(v):
        if off + 4 > len(buf):
            raise TruncatedPayloadError(f"{path}: truncated variable name table")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n > len(buf):
            raise TruncatedPayloadError(f"{path}: truncated variable name table")
        names.append(buf[off:off + n].decode("utf-8"))
        off += n
    expected = off + 8 * (h + w) + 4 * t * v * h * w
    if len(buf) < expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise SizeMismatchError(f"{path}: expected {expected} bytes, got {len(buf)}")
    lats = np.frombuffer(buf, dtype="<f8", count=h, offset=off).astype(np.float64)
    off += 8 * h
    lons = np.frombuffer(buf, dtype="<f8", count=w, offset=off).astype(np.float64)
    off += 8 * w
    data = np.frombuffer(buf, dtype="<f4", count=t * v * h * w, offset=off).reshape(t, v, h, w).astype(np.float32)
    out = GsfFile(names, lats, lons, data, version)
    if h < 2 or w < 2 or np.any(np.diff(lats) <= 0) or np.any(np.diff(lons) <= 0):
        raise FormatError(f"{path}: coordinates violate grid invariants")
    out.grid  # validates spacing
    return out


# synthetic fields ----------------------------------------------------------

@dataclass
class SyntheticConfig:
    seed: int = 0
    n_modes: int = 6
    max_lon_wavenumber: int = 5
    max_lat_wavenumber: int = 4
    amplitude: tuple = (0.3, 1.0)
    omega_max: float = 0.15


@dataclass
class SyntheticModes:
    """Drawn mode parameters; ``a``, ``psi``, ``chi`` are ``(n_vars, n_modes)``."""

    n: np.ndarray
    m: np.ndarray
    omega: np.ndarray
    a: np.ndarray
    psi: np.ndarray
    chi: np.ndarray

    @classmethod
    def draw(cls, cfg: SyntheticConfig, n_vars: int) -> "SyntheticModes":
        rng = np.random.default_rng(cfg.seed)
        M = cfg.n_modes
        n = rng.integers(0, cfg.max_lon_wavenumber + 1, size=M)
        m = rng.integers(0, cfg.max_lat_wavenumber + 1, size=M)
        omega = rng.uniform(-cfg.omega_max, cfg.omega_max, size=M)
        a = rng.uniform(cfg.amplitude[0], cfg.amplitude[1], size=(n_vars, M))
        psi = rng.uniform(0.0, 2.0 * math.pi, size=(n_vars, M))
        chi = rng.uniform(0.0, 2.0 * math.pi, size=(n_vars, M))
        return cls(n, m, omega, a, psi, chi)

    def evaluate(self, lat_deg, lon_deg, t) -> np.ndarray:
        """Values ``(n_vars,) + broadcast(lat, lon).shape`` at scalar time ``t``."""
        lat = np.radians(np.asarray(lat_deg, dtype=np.float64))
        lon = np.radians(np.asarray(lon_deg, dtype=np.float64))
        out = 0.0
        for k in range(len(self.n)):
            zonal = np.cos(self.n[k] * lon[None] + self.omega[k] * t + self.psi[:, k].reshape((-1,) + (1,) * lon.ndim))
            merid = np.cos(self.m[k] * lat[None] + self.chi[:, k].reshape((-1,) + (1,) * lat.ndim))
            out = out + self.a[:, k].reshape((-1,) + (1,) * lat.ndim) * zonal * merid
        return out


def synth_fields(cfg: SyntheticConfig, grid: LatLonGrid, n_vars: int, n_time: int, t0: int = 0) -> np.ndarray:
    """Deterministic ``(n_time, n_vars, n_lat, n_lon)`` stack of rotating cosine modes."""
    modes = SyntheticModes.draw(cfg, n_vars)
    la, lo = np.meshgrid(grid.lats, grid.lons, indexing="ij")
    return np.stack([modes.evaluate(la, lo, t0 + t) for t in range(n_time)])


# normalization ---------------------------------------------------------------

@dataclass
class NormStats:
    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        self.mins = np.asarray(self.mins, dtype=np.float64)
        self.maxs = np.asarray(self.maxs, dtype=np.float64)
        bad = np.nonzero(~(self.maxs > self.mins))[0]
        if len(bad):
            raise ConstantVariableError(f"variables {bad.tolist()} are constant over the training split")


def compute_norm_stats(stack: np.ndarray, train_idx: Sequence[int]) -> NormStats:
    sub = np.asarray(stack, dtype=np.float64)[np.asarray(list(train_idx))]
    axes = (0, 2, 3)
    return NormStats(sub.min(axis=axes), sub.max(axis=axes))


def normalize(values, stats: NormStats, clamp: bool = False) -> np.ndarray:
    """Map physical ``(..., var, lat, lon)`` values to [0, 1] per variable."""
    v = np.asarray(values, dtype=np.float64)
    lo = stats.mins.reshape(-1, 1, 1)
    hi = stats.maxs.reshape(-1, 1, 1)
    out = (v - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0) if clamp else out


def denormalize(values, stats: NormStats) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo = stats.mins.reshape(-1, 1, 1)
    hi = stats.maxs.reshape(-1, 1, 1)
    return v * (hi - lo) + lo


def make_lowres_input(hr: FieldTensor, anchor: LatLonGrid) -> FieldTensor:
    """Degrade a high-resolution field onto the anchor grid by bilinear sampling."""
    if hr.grid == anchor:
        return FieldTensor(anchor, hr.values.copy())
    return bilinear_interp(hr, anchor)


def split_indices(n_time: int, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Contiguous train/val/test time split."""
    n_train = int(round(n_time * fractions[0]))
    n_val = int(round(n_time * fractions[1]))
    idx = np.arange(n_time)
    return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}
