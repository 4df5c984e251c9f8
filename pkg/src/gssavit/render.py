"""Transmittance-weighted splatting of a :class:`GaussianSet` at query points.

A query point ``p`` (on the ``z = 1`` plane) receives

    F(p) = sum_i f_i * a_i(p) * prod_{j<i} (1 - a_j(p)),
    a_i(p) = alpha_i * exp(-0.5 * d^T A_i d),

over primitives whose Mahalanobis distance is within the cutoff, in ascending
primitive index.  ``A_i`` is the in-plane block of ``Sigma_i^-1`` and ``d``
uses the wrapped longitude difference.  Candidate primitives are found from
the anchor grid with a conservative radius, so the result equals a scan over
all primitives with the same cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _accel, _render_numpy
from . import autodiff as ad
from .gaussians import GaussianPrimitive, GaussianSet, anchor_positions, wrap_lon
from .grid import FieldTensor, LatLonGrid

if _accel.USE_NUMBA:
    from . import _render_numba
else:  # pragma: no cover
    _render_numba = None


@dataclass(frozen=True)
class RenderConfig:
    mahalanobis_cutoff: float = 3.0
    max_contributors: Optional[int] = None

    def __post_init__(self):
        if not self.mahalanobis_cutoff > 0:
            raise ValueError("mahalanobis_cutoff must be positive")
        if self.max_contributors is not None and self.max_contributors < 1:
            raise ValueError("max_contributors must be positive or None")

    @property
    def brute_force(self) -> bool:
        return math.isinf(self.mahalanobis_cutoff)


BRUTE_FORCE = RenderConfig(mahalanobis_cutoff=math.inf)


def _min_eig(prec: np.ndarray) -> np.ndarray:
    a, b, c = prec[:, 0], prec[:, 1], prec[:, 2]
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


def _geometry(anchor: LatLonGrid, mu: np.ndarray, prec: np.ndarray, cfg: RenderConfig):
    """Pack grid/radius data for the kernels; returns ``(geo, max_cand)``."""
    k = anchor.size
    brute = cfg.brute_force
    rad = 0.0
    if not brute:
        lam = _min_eig(prec)
        if np.any(lam <= 0):
            brute = True
        else:
            rad = float(np.max(cfg.mahalanobis_cutoff / np.sqrt(lam))) * (1.0 + 1e-7)
            anchors = anchor_positions(anchor)[:, :2]
            disp = np.hypot(mu[:, 0] - anchors[:, 0], wrap_lon(mu[:, 1] - anchors[:, 1]))
            rad += float(disp.max(initial=0.0)) * (1.0 + 1e-7)
    if brute:
        max_cand = k
    else:
        rows = min(anchor.n_lat, 2 * int(math.ceil(rad / anchor.dlat)) + 4)
        cols = min(anchor.n_lon, 2 * int(math.ceil(rad / anchor.dlon)) + 4)
        max_cand = rows * cols
    geo = np.array([anchor.n_lat, anchor.n_lon, anchor.lats[0], anchor.dlat,
                    anchor.lons[0], anchor.dlon, rad, 1.0 if brute else 0.0])
    return geo, max_cand


def _kernels(backend: Optional[str]):
    backend = backend or _accel.default_backend()
    if backend == "numba":
        if _render_numba is None:  # pragma: no cover
            raise RuntimeError("numba backend requested but numba is unavailable")
        return _render_numba
    if backend == "numpy":
        return _render_numpy
    raise ValueError(f"unknown backend {backend!r}")


def _args(anchor, mu, prec, opac, feat, lat, lon, cfg):
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    prec = np.ascontiguousarray(prec, dtype=np.float64)
    geo, max_cand = _geometry(anchor, mu, prec, cfg)
    cutoff2 = cfg.mahalanobis_cutoff ** 2
    max_c = -1 if cfg.max_contributors is None else int(cfg.max_contributors)
    return (mu, prec, np.ascontiguousarray(opac, dtype=np.float64),
            np.ascontiguousarray(feat, dtype=np.float64), geo,
            np.ascontiguousarray(lat, dtype=np.float64).ravel(),
            np.ascontiguousarray(lon, dtype=np.float64).ravel(), cutoff2, max_c, max_cand)


def splat_arrays(anchor: LatLonGrid, mu, prec, opac, feat, lat, lon,
                 cfg: RenderConfig = RenderConfig(), backend: Optional[str] = None):
    """Render raw arrays at points; returns ``(values (P,N), accumulated opacity (P,))``."""
    return _kernels(backend).render_forward(*_args(anchor, mu, prec, opac, feat, lat, lon, cfg))


def splat_arrays_backward(anchor: LatLonGrid, mu, prec, opac, feat, lat, lon, gout,
                          cfg: RenderConfig = RenderConfig(), backend: Optional[str] = None):
    """Adjoint of :func:`splat_arrays` w.r.t. (features, opacity, precision, mu[:, :2])."""
    args = _args(anchor, mu, prec, opac, feat, lat, lon, cfg)
    gout = np.ascontiguousarray(gout, dtype=np.float64).reshape(len(args[5]), -1)
    return _kernels(backend).render_backward(*args, gout)


# GaussianSet-level API ----------------------------------------------------

def overlap_set(gset: GaussianSet, p, cfg: RenderConfig = RenderConfig()) -> list:
    """Indices whose Mahalanobis distance to ``p`` is within the cutoff, ascending."""
    prec = gset.precision()
    d0 = p[0] - gset.mu[:, 0]
    d1 = wrap_lon(p[1] - gset.mu[:, 1])
    q = prec[:, 0] * d0 * d0 + 2.0 * prec[:, 1] * d0 * d1 + prec[:, 2] * d1 * d1
    idx = [int(i) for i in np.nonzero(q <= cfg.mahalanobis_cutoff ** 2)[0]]
    if cfg.max_contributors is not None:
        idx = idx[: cfg.max_contributors]
    return idx


def effective_opacity(g: GaussianPrimitive, p) -> float:
    mu = g.mu if g.mu is not None else np.array([0.0, 0.0, 1.0])
    a = GaussianSet(None, mu[None], g.quat[None], g.scales[None], [g.opacity], g.features[None]).precision()[0]
    d0 = p[0] - mu[0]
    d1 = float(wrap_lon(p[1] - mu[1]))
    q = a[0] * d0 * d0 + 2.0 * a[1] * d0 * d1 + a[2] * d1 * d1
    return float(g.opacity * np.exp(-0.5 * q))


def render_points(gset: GaussianSet, lat, lon, cfg: RenderConfig = RenderConfig(),
                  backend: Optional[str] = None, return_accumulated: bool = False):
    out, acc = splat_arrays(gset.grid, gset.mu, gset.precision(), gset.opacity, gset.features,
                            lat, lon, cfg, backend)
    return (out, acc) if return_accumulated else out


def render_point(gset: GaussianSet, p, cfg: RenderConfig = RenderConfig(),
                 backend: Optional[str] = None) -> np.ndarray:
    return render_points(gset, [p[0]], [p[1]], cfg, backend)[0]


def render_grid(gset: GaussianSet, target: LatLonGrid, cfg: RenderConfig = RenderConfig(),
                backend: Optional[str] = None) -> FieldTensor:
    nodes = target.nodes()
    out = render_points(gset, nodes[:, 0], nodes[:, 1], cfg, backend)
    return FieldTensor(target, out.T.reshape(gset.n_vars, target.n_lat, target.n_lon))


# autodiff integration ------------------------------------------------------

def splat(features: ad.Tensor, opacity: ad.Tensor, precision: ad.Tensor, anchor: LatLonGrid,
          lat, lon, cfg: RenderConfig = RenderConfig(), mu=None, backend: Optional[str] = None) -> ad.Tensor:
    """Differentiable render at points; output ``(P, N)``.

    ``mu`` may be a Tensor of shape ``(K, 2)`` (learnable positions) or an
    array; it defaults to the anchor nodes.
    """
    mu_t = mu if isinstance(mu, ad.Tensor) else None
    mu_arr = anchor_positions(anchor)[:, :2] if mu is None else (mu.data if mu_t is not None else np.asarray(mu))
    dtype = features.dtype
    out, _ = splat_arrays(anchor, mu_arr, precision.data, opacity.data, features.data, lat, lon, cfg, backend)

    def bwd(g):
        gf, go, gp, gm = splat_arrays_backward(anchor, mu_arr, precision.data, opacity.data,
                                               features.data, lat, lon, g, cfg, backend)
        grads = [gf.astype(dtype), go.reshape(opacity.shape).astype(dtype), gp.astype(dtype)]
        if mu_t is not None:
            grads.append(gm.astype(dtype))
        return grads

    parents = [features, opacity, precision] + ([mu_t] if mu_t is not None else [])
    return ad.make_op(out.astype(dtype), parents, bwd, "splat")


def render_backward(gset: GaussianSet, target: LatLonGrid, cfg: RenderConfig, upstream: FieldTensor,
                    raw: Optional[dict] = None, backend: Optional[str] = None) -> dict:
    """Gradients of ``sum(render_grid(...) * upstream)`` w.r.t. raw decoder outputs.

    ``raw`` holds ``feature_logits``, ``quat_raw``, ``scale_raw``,
    ``opacity_logit``; by default they are recovered by inverting the
    activations of ``gset`` (so ``quat_raw`` is the unit quaternion).
    Positions are fixed and receive no gradient.
    """
    from .gaussians import deactivate_arrays

    if raw is None:
        fl, qr, sr, ol = deactivate_arrays(gset.features, gset.quat, gset.scales, gset.opacity)
        raw = dict(feature_logits=fl, quat_raw=qr, scale_raw=sr, opacity_logit=ol)
    leaves = {k: ad.Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in raw.items()}
    feats, opac, prec = activate_tensors(leaves["feature_logits"], leaves["quat_raw"],
                                         leaves["scale_raw"], leaves["opacity_logit"])
    nodes = target.nodes()
    out = splat(feats, opac, prec, gset.grid, nodes[:, 0], nodes[:, 1], cfg, mu=gset.mu[:, :2], backend=backend)
    up = upstream.values.reshape(upstream.n_vars, -1).T
    ad.backward(ad.reduce_sum(out * up))
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def activate_tensors(feature_logits: ad.Tensor, quat_raw: ad.Tensor, scale_raw: ad.Tensor,
                     opacity_logit: ad.Tensor):
    """Differentiable activation; returns ``(features, opacity, precision (K,3))``."""
    from .gaussians import EPS_OPACITY, EPS_SCALE

    feats = ad.sigmoid(feature_logits)
    opac = ad.sigmoid(opacity_logit) * (1.0 - EPS_OPACITY)
    scales = ad.softplus(scale_raw) + EPS_SCALE
    return feats, opac, precision_tensor(quat_raw, scales)


def precision_tensor(quat_raw: ad.Tensor, scales: ad.Tensor) -> ad.Tensor:
    """In-plane block (a_ll, a_lm, a_mm) of ``(R S S^T R^T)^-1`` as an autodiff graph."""
    qn = quat_raw / ad.sqrt(ad.reduce_sum(quat_raw * quat_raw, axis=-1, keepdims=True))
    w, x, y, z = (ad.slice_axis(qn, i, i + 1) for i in range(4))
    r0 = [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)]
    r1 = [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)]
    u = 1.0 / (scales * scales)
    uu = [ad.slice_axis(u, i, i + 1) for i in range(3)]
    a00 = r0[0] * r0[0] * uu[0] + r0[1] * r0[1] * uu[1] + r0[2] * r0[2] * uu[2]
    a01 = r0[0] * r1[0] * uu[0] + r0[1] * r1[1] * uu[1] + r0[2] * r1[2] * uu[2]
    a11 = r1[0] * r1[0] * uu[0] + r1[1] * r1[1] * uu[1] + r1[2] * r1[2] * uu[2]
    return ad.concat([a00, a01, a11], axis=-1)
