"""Gaussian primitives anchored on a latitude-longitude grid.

Coordinates are ``(lat_deg, lon_deg, z)`` with ``z = 1`` for every center, so
scales carry degree units.  Quaternions are ``(w, x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from .errors import DegenerateQuaternionError, GridMismatchError
from .grid import LatLonGrid

EPS_SCALE = 1e-6
EPS_OPACITY = 1e-6
Z0 = 1.0
_QUAT_MIN_NORM = 1e-12


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    # log(exp(y) - 1) written to stay finite for large y
    return y + np.log(-np.expm1(-y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def wrap_lon(dlon):
    """Map longitude differences into ``[-180, 180)``."""
    return np.mod(np.asarray(dlon, dtype=np.float64) + 180.0, 360.0) - 180.0


def _normalize_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= _QUAT_MIN_NORM):
        raise DegenerateQuaternionError(f"quaternion norm {n.min():.3e} is degenerate")
    return q / n


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix for quaternion(s) ``q`` of shape ``(..., 4)``.

    ``q`` is normalized first, so any positive multiple gives the same matrix.
    """
    w, x, y, z = np.moveaxis(_normalize_quat(q), -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(r.shape[:-1] + (3, 3))


def build_covariance(q, s) -> np.ndarray:
    """``R diag(s) diag(s)^T R^T``, symmetrized to remove rounding skew."""
    R = quat_to_rotation(q)
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be strictly positive")
    M = R * s[..., None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def inplane_precision(q, s) -> np.ndarray:
    """Upper-left 2x2 block of ``Sigma^-1`` as ``(..., 3)`` = (a_ll, a_lm, a_mm).

    Query points sit on the ``z = 1`` plane, so only this block enters the
    quadratic form; it is the block of the 3x3 inverse, not the inverse of the
    2x2 covariance block.
    """
    R = quat_to_rotation(q)
    u = 1.0 / np.square(np.asarray(s, dtype=np.float64))
    a00 = np.sum(R[..., 0, :] * R[..., 0, :] * u, axis=-1)
    a01 = np.sum(R[..., 0, :] * R[..., 1, :] * u, axis=-1)
    a11 = np.sum(R[..., 1, :] * R[..., 1, :] * u, axis=-1)
    return np.stack([a00, a01, a11], axis=-1)


@dataclass
class RawGaussianOutput:
    """Pre-activation decoder output for one primitive."""

    feature_logits: np.ndarray
    quat_raw: np.ndarray
    scale_raw: np.ndarray
    opacity_logit: float


@dataclass
class GaussianPrimitive:
    quat: np.ndarray
    scales: np.ndarray
    opacity: float
    features: np.ndarray
    mu: Optional[np.ndarray] = None

    def covariance(self) -> np.ndarray:
        return build_covariance(self.quat, self.scales)


def activate_arrays(feature_logits, quat_raw, scale_raw, opacity_logit):
    """Vectorized activation: returns ``(features, quat, scales, opacity)``."""
    features = sigmoid(feature_logits)
    quat = _normalize_quat(quat_raw)
    scales = softplus(scale_raw) + EPS_SCALE
    opacity = sigmoid(opacity_logit) * (1.0 - EPS_OPACITY)
    return features, quat, scales, opacity


def deactivate_arrays(features, quat, scales, opacity):
    """Inverse of :func:`activate_arrays` on the activated domain."""
    return (
        logit(features),
        np.asarray(quat, dtype=np.float64),
        inverse_softplus(np.asarray(scales) - EPS_SCALE),
        logit(np.asarray(opacity) / (1.0 - EPS_OPACITY)),
    )


def activate_raw(raw: RawGaussianOutput) -> GaussianPrimitive:
    f, q, s, a = activate_arrays(raw.feature_logits, raw.quat_raw, raw.scale_raw, raw.opacity_logit)
    return GaussianPrimitive(quat=q, scales=s, opacity=float(a), features=f)


def eval_pdf(g: GaussianPrimitive, p) -> float:
    """Opacity-scaled normalized Gaussian density at 3D point ``p``."""
    mu = np.array([0.0, 0.0, Z0]) if g.mu is None else np.asarray(g.mu, dtype=np.float64)
    d = np.asarray(p, dtype=np.float64) - mu
    d[1] = wrap_lon(d[1])
    R = quat_to_rotation(g.quat)
    s = np.asarray(g.scales, dtype=np.float64)
    y = (R.T @ d) / s
    norm = (2.0 * np.pi) ** -1.5 / np.prod(s)
    return float(g.opacity * norm * np.exp(-0.5 * y @ y))


class GaussianSet:
    """Struct-of-arrays collection of primitives anchored on ``grid``.

    Arrays: ``mu (K,3)``, ``quat (K,4)``, ``scales (K,3)``, ``opacity (K,)``,
    ``features (K,N)``; primitive ``i`` sits at grid node ``i`` in row-major order.
    """

    def __init__(self, grid: LatLonGrid, mu, quat, scales, opacity, features):
        self.grid = grid
        self.mu = np.ascontiguousarray(mu, dtype=np.float64)
        self.quat = np.ascontiguousarray(quat, dtype=np.float64)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64)
        self.opacity = np.ascontiguousarray(opacity, dtype=np.float64)
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        k = len(self.mu)
        for name in ("quat", "scales", "opacity", "features"):
            if len(getattr(self, name)) != k:
                raise GridMismatchError(f"{name} has {len(getattr(self, name))} rows, expected {k}")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            quat=self.quat[i], scales=self.scales[i], opacity=float(self.opacity[i]),
            features=self.features[i], mu=self.mu[i],
        )

    def __iter__(self) -> Iterator[GaussianPrimitive]:
        return (self[i] for i in range(len(self)))

    @property
    def n_vars(self) -> int:
        return self.features.shape[1]

    def precision(self) -> np.ndarray:
        return inplane_precision(self.quat, self.scales)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.grid, self.mu.copy(), self.quat.copy(), self.scales.copy(),
                           self.opacity.copy(), self.features.copy())


def anchor_positions(grid: LatLonGrid) -> np.ndarray:
    nodes = grid.nodes()
    return np.column_stack([nodes, np.full(len(nodes), Z0)])


def init_gaussians_from_grid(grid: LatLonGrid, quat=(1.0, 0.0, 0.0, 0.0), scales=None,
                             opacity: float = 0.9, n_vars: int = 1) -> GaussianSet:
    """One primitive per grid node, features zeroed, shared default shape.

    ``scales`` defaults to half the anchor spacing on every axis.
    """
    k = grid.size
    if scales is None:
        half = 0.5 * min(grid.dlat, grid.dlon)
        scales = (half, half, half)
    return GaussianSet(
        grid,
        anchor_positions(grid),
        np.tile(_normalize_quat(quat), (k, 1)),
        np.tile(np.asarray(scales, dtype=np.float64), (k, 1)),
        np.full(k, float(opacity)),
        np.zeros((k, n_vars)),
    )
