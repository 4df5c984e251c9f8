"""Scale-conditioned vision transformer that emits one Gaussian per token.

Pipeline per sample: patch embedding plus learnable positional embedding,
``L`` layers of (ratio cross-attention, window attention + FFN, global
attention + FFN) in pre-norm residual form, a final layer norm, and either
two decoder heads (variables, Gaussian parameters) or a single joint head.

Parameters live in a flat ``dict[str, np.ndarray]``; :meth:`GSSAViT.forward`
takes the same keys as :class:`~gssavit.autodiff.Tensor` leaves so training
can differentiate through it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import truncnorm

from . import autodiff as ad
from .errors import GridMismatchError, NonPositiveRatioError, ShapeMismatchError
from .gaussians import EPS_OPACITY, EPS_SCALE, GaussianSet, activate_arrays, anchor_positions, inverse_softplus, logit
from .grid import FieldTensor, LatLonGrid, build_grid
from .render import activate_tensors

HEAD_MODES = ("two-heads", "one-head")
LAYOUTS = ("grid", "pool2", "upsample2")
GAUSS_ARITY = 8  # quaternion 4 + scales 3 + opacity 1


@dataclass
class ModelConfig:
    n_vars: int
    anchor: tuple = (32, 64)
    embed_dim: int = 64
    layers: int = 4
    heads: int = 4
    window: tuple = (4, 4)
    head_mode: str = "two-heads"
    head_hidden: Optional[int] = None
    learnable_positions: bool = False
    fixed_gaussian_params: bool = False
    layout: str = "grid"
    init_scale_spacing: float = 0.5
    init_opacity: float = 0.9
    init_std: float = 0.02

    def __post_init__(self):
        self.anchor = tuple(int(v) for v in self.anchor)
        self.window = tuple(int(v) for v in self.window)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if self.layout == "pool2" and self.anchor[1] % 2:
            raise ValueError("pool2 layout needs an even number of longitudes")
        th, tw = self.token_shape
        if th % self.window[0] or tw % self.window[1]:
            raise ValueError(f"window {self.window} does not divide token grid {self.token_shape}")

    @property
    def anchor_grid(self) -> LatLonGrid:
        return build_grid(*self.anchor)

    @property
    def token_shape(self) -> tuple:
        h, w = self.anchor
        return (h, w // 2) if self.layout == "pool2" else (h, w)

    @property
    def n_tokens(self) -> int:
        return self.token_shape[0] * self.token_shape[1]

    @property
    def gaussian_grid(self) -> LatLonGrid:
        """Grid the decoded primitives are anchored on."""
        h, w = self.anchor
        if self.layout == "pool2":
            return build_grid(h, w // 2)
        if self.layout == "upsample2":
            return build_grid(2 * h - 1, 2 * w)
        return build_grid(h, w)

    @property
    def hidden(self) -> int:
        return self.head_hidden or self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _trunc_normal(rng, shape, std):
    return truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)


def gauss_bias(cfg: ModelConfig) -> np.ndarray:
    """Raw Gaussian output that activates to the configured initial shape."""
    g = cfg.gaussian_grid
    s = cfg.init_scale_spacing * min(g.dlat, g.dlon)
    return np.concatenate([[1.0, 0.0, 0.0, 0.0], np.full(3, float(inverse_softplus(s - EPS_SCALE))),
                           [float(logit(cfg.init_opacity / (1.0 - EPS_OPACITY)))]])


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict:
    """Truncated-normal projections, zero biases, zero positional embedding."""
    rng = np.random.default_rng(seed)
    D, N = cfg.embed_dim, cfg.n_vars
    p: dict = {}

    def linear(name, n_in, n_out):
        p[f"{name}.w"] = _trunc_normal(rng, (n_in, n_out), cfg.init_std)
        p[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        p[f"{name}.g"] = np.ones(D)
        p[f"{name}.b"] = np.zeros(D)

    p["pos"] = np.zeros((cfg.n_tokens, D))
    linear("patch", N * (2 if cfg.layout == "pool2" else 1), D)
    linear("scale", 1, D)
    for l in range(cfg.layers):
        for blk in ("cross", "win", "glob"):
            norm(f"l{l}.{blk}.ln")
            for proj in ("q", "k", "v", "o"):
                linear(f"l{l}.{blk}.{proj}", D, D)
        for ffn in ("ffn1", "ffn2"):
            norm(f"l{l}.{ffn}.ln")
            linear(f"l{l}.{ffn}.fc1", D, 4 * D)
            linear(f"l{l}.{ffn}.fc2", 4 * D, D)
    norm("final.ln")
    if cfg.layout == "upsample2":
        linear("up", D, 4 * D)
    H = cfg.hidden
    if cfg.head_mode == "two-heads":
        linear("var.fc1", D, H)
        linear("var.fc2", H, N)
        if not cfg.fixed_gaussian_params:
            linear("gauss.fc1", D, H)
            linear("gauss.fc2", H, GAUSS_ARITY)
            p["gauss.fc2.w"][:] = 0.0
            p["gauss.fc2.b"] = gauss_bias(cfg)
    else:
        n_out = N + (0 if cfg.fixed_gaussian_params else GAUSS_ARITY)
        linear("head.fc1", D, H)
        linear("head.fc2", H, n_out)
        if not cfg.fixed_gaussian_params:
            p["head.fc2.w"][:, N:] = 0.0
            p["head.fc2.b"][N:] = gauss_bias(cfg)
    if cfg.learnable_positions:
        p["mu_offset"] = np.zeros((cfg.gaussian_grid.size, 2))
    return {k: np.asarray(v, dtype=dtype) for k, v in p.items()}


def no_decay(name: str) -> bool:
    """Parameters excluded from weight decay: biases, norms, positional embedding."""
    return name.endswith(".b") or name.endswith(".g") or name in ("pos", "mu_offset")


@dataclass
class Decoded:
    """Differentiable decoder output for a batch."""

    features: ad.Tensor  # (B, K, N) in [0, 1]
    opacity: ad.Tensor  # (B, K)
    precision: ad.Tensor  # (B, K, 3)
    raw_features: ad.Tensor
    raw_gauss: ad.Tensor  # (B, K, 8)
    mu: Optional[ad.Tensor] = None  # (K, 2) when positions are learnable
    grid: Optional[LatLonGrid] = None
    extras: dict = field(default_factory=dict)


def linear(x: ad.Tensor, P: dict, name: str) -> ad.Tensor:
    return ad.matmul(x, P[f"{name}.w"]) + P[f"{name}.b"]


def norm(x: ad.Tensor, P: dict, name: str) -> ad.Tensor:
    return ad.layer_norm(x, P[f"{name}.g"], P[f"{name}.b"])


def split_heads(x: ad.Tensor, heads: int) -> ad.Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: ad.Tensor) -> ad.Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(q_in: ad.Tensor, kv_in: ad.Tensor, P: dict, name: str, heads: int) -> ad.Tensor:
    """Multi-head scaled dot-product attention; inputs are ``(B, T, D)``."""
    q = split_heads(linear(q_in, P, f"{name}.q"), heads)
    k = split_heads(linear(kv_in, P, f"{name}.k"), heads)
    v = split_heads(linear(kv_in, P, f"{name}.v"), heads)
    q = q * (1.0 / math.sqrt(q.shape[-1]))  # scaling q is cheaper than scaling the score matrix
    w = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), axis=-1)
    return linear(merge_heads(ad.matmul(w, v)), P, f"{name}.o")


def to_windows(x: ad.Tensor, grid_shape: tuple, window: tuple) -> ad.Tensor:
    b, _, d = x.shape
    h, w = grid_shape
    wh, ww = window
    x = ad.reshape(x, (b, h // wh, wh, w // ww, ww, d))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b * (h // wh) * (w // ww), wh * ww, d))


def from_windows(x: ad.Tensor, batch: int, grid_shape: tuple, window: tuple) -> ad.Tensor:
    h, w = grid_shape
    wh, ww = window
    d = x.shape[-1]
    x = ad.reshape(x, (batch, h // wh, w // ww, wh, ww, d))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (batch, h * w, d))


class GSSAViT:
    """Model bound to a :class:`ModelConfig`; holds no training state."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    # stages ---------------------------------------------------------------
    def embed(self, values: ad.Tensor, P: dict) -> ad.Tensor:
        """``values`` is ``(B, N, H, W)`` normalized; returns ``(B, K, D)`` tokens."""
        cfg = self.cfg
        b, n, h, w = values.shape
        if (h, w) != cfg.anchor or n != cfg.n_vars:
            raise GridMismatchError(f"input {(n, h, w)} does not match anchor {cfg.anchor} with {cfg.n_vars} vars")
        x = ad.transpose(values, (0, 2, 3, 1))  # (B, H, W, N)
        if cfg.layout == "pool2":
            x = ad.reshape(x, (b, h * (w // 2), 2 * n))
        else:
            x = ad.reshape(x, (b, h * w, n))
        return linear(x, P, "patch") + P["pos"]

    def scale_embed(self, ratios, P: dict) -> ad.Tensor:
        r = np.atleast_1d(np.asarray(ratios, dtype=P["scale.w"].dtype))
        if np.any(r <= 0):
            raise NonPositiveRatioError(f"ratio must be positive, got {r}")
        return linear(ad.Tensor(r.reshape(-1, 1, 1)), P, "scale")  # (B, 1, D)

    def scale_cross_attention(self, h: ad.Tensor, r_emb: ad.Tensor, P: dict, layer: int) -> ad.Tensor:
        if r_emb.shape[-1] != h.shape[-1]:
            raise ShapeMismatchError(f"scale embedding {r_emb.shape} vs tokens {h.shape}")
        name = f"l{layer}.cross"
        return h + attention(norm(h, P, f"{name}.ln"), r_emb, P, name, self.cfg.heads)

    def attention_block(self, h: ad.Tensor, P: dict, layer: int) -> ad.Tensor:
        cfg = self.cfg
        b = h.shape[0]
        name = f"l{layer}"
        xw = to_windows(norm(h, P, f"{name}.win.ln"), cfg.token_shape, cfg.window)
        h = h + from_windows(attention(xw, xw, P, f"{name}.win", cfg.heads), b, cfg.token_shape, cfg.window)
        h = h + self._ffn(h, P, f"{name}.ffn1")
        x = norm(h, P, f"{name}.glob.ln")
        h = h + attention(x, x, P, f"{name}.glob", cfg.heads)
        h = h + self._ffn(h, P, f"{name}.ffn2")
        return h

    @staticmethod
    def _ffn(h: ad.Tensor, P: dict, name: str) -> ad.Tensor:
        return linear(ad.gelu(linear(norm(h, P, f"{name}.ln"), P, f"{name}.fc1")), P, f"{name}.fc2")

    def _upsample(self, h: ad.Tensor, P: dict) -> ad.Tensor:
        b, _, d = h.shape
        th, tw = self.cfg.token_shape
        x = ad.reshape(linear(h, P, "up"), (b, th, tw, 2, 2, d))
        x = ad.reshape(ad.transpose(x, (0, 1, 3, 2, 4, 5)), (b, 2 * th, 2 * tw, d))
        x = ad.slice_axis(x, 0, 2 * th - 1, axis=1)  # sub-rows past the north pole
        return ad.reshape(x, (b, (2 * th - 1) * 2 * tw, d))

    def decode(self, h: ad.Tensor, P: dict):
        """Returns ``(feature_logits (B,K,N), gauss_raw (B,K,8))``."""
        cfg = self.cfg
        N = cfg.n_vars
        if cfg.layout == "upsample2":
            h = self._upsample(h, P)

        def mlp(name):
            return linear(ad.gelu(linear(h, P, f"{name}.fc1")), P, f"{name}.fc2")

        if cfg.head_mode == "two-heads":
            fl = mlp("var")
            gr = None if cfg.fixed_gaussian_params else mlp("gauss")
        else:
            out = mlp("head")
            fl = ad.slice_axis(out, 0, N)
            gr = None if cfg.fixed_gaussian_params else ad.slice_axis(out, N, N + GAUSS_ARITY)
        if gr is None:
            b, k = fl.shape[:2]
            gr = ad.Tensor(np.broadcast_to(gauss_bias(cfg).astype(fl.dtype), (b, k, GAUSS_ARITY)).copy())
        return fl, gr

    # full pass --------------------------------------------------------------
    def forward(self, values, ratios, P: dict) -> Decoded:
        """``values``: ``(B, N, H, W)`` array or Tensor of normalized inputs."""
        cfg = self.cfg
        dtype = P["pos"].dtype
        if not isinstance(values, ad.Tensor):
            values = ad.Tensor(np.asarray(values, dtype=dtype))
        if values.ndim == 3:
            values = ad.reshape(values, (1,) + values.shape)
        ratios = np.broadcast_to(np.atleast_1d(np.asarray(ratios, dtype=np.float64)), (values.shape[0],))
        h = self.embed(values, P)
        r_emb = self.scale_embed(ratios, P)
        for l in range(cfg.layers):
            h = self.scale_cross_attention(h, r_emb, P, l)
            h = self.attention_block(h, P, l)
        h = norm(h, P, "final.ln")
        fl, gr = self.decode(h, P)
        feats, opac, prec = activate_tensors(
            fl, ad.slice_axis(gr, 0, 4), ad.slice_axis(gr, 4, 7), ad.reshape(ad.slice_axis(gr, 7, 8), gr.shape[:2]))
        mu = None
        if cfg.learnable_positions:
            mu = ad.add(P["mu_offset"], anchor_positions(cfg.gaussian_grid)[:, :2].astype(dtype))
        return Decoded(feats, opac, prec, fl, gr, mu, cfg.gaussian_grid)

    def gaussian_sets(self, values, ratios, params: dict) -> list:
        """Non-differentiable forward returning one :class:`GaussianSet` per sample."""
        P = {k: ad.Tensor(v) for k, v in params.items()}
        dec = self.forward(values, ratios, P)
        grid = dec.grid
        mu = anchor_positions(grid)
        if dec.mu is not None:
            mu = np.column_stack([dec.mu.data, mu[:, 2]])
        out = []
        for b in range(dec.features.shape[0]):
            gr = dec.raw_gauss.data[b].astype(np.float64)
            f, q, s, a = activate_arrays(dec.raw_features.data[b].astype(np.float64), gr[:, :4], gr[:, 4:7], gr[:, 7])
            out.append(GaussianSet(grid, mu, q, s, a, f))
        return out


def field_batch(fields) -> np.ndarray:
    """Stack FieldTensors (or arrays) into a ``(B, N, H, W)`` array."""
    if isinstance(fields, FieldTensor):
        fields = [fields]
    return np.stack([f.values if isinstance(f, FieldTensor) else np.asarray(f) for f in fields])
