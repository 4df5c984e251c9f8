"""Training: pair sampling, AdamW with cosine decay, rollout and rollout fine-tuning.

The loss is the mean squared error between the rendered field and the
normalized target on the target grid.  Each sample in a batch draws its own
ratio, so one batch mixes target resolutions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .data import NormStats, compute_norm_stats, make_lowres_input, normalize, split_indices
from .errors import DatasetTooShortError, DivergenceError, GridMismatchError, NonFiniteError, ShapeMismatchError
from .grid import FieldTensor, LatLonGrid, bilinear_interp, is_refinement, refined_grid
from .model import Decoded, GSSAViT, ModelConfig, init_params, no_decay
from .render import RenderConfig, splat

MODES = ("downscale", "forecast")


@dataclass
class TrainConfig:
    mode: str = "downscale"
    iters: int = 1000
    lr_init: float = 1e-4
    lr_final: float = 1e-6
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch: int = 1
    ratio_set: tuple = (2.0, 4.0)
    rollout_steps: int = 1
    seed: int = 0
    precision: str = "double"
    grad_clip: Optional[float] = 1.0
    checkpoint_every: int = 0
    mahalanobis_cutoff: float = 3.0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.ratio_set = tuple(float(r) for r in self.ratio_set)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iters < 1 or self.batch < 1 or self.rollout_steps < 1:
            raise ValueError("iters, batch and rollout_steps must be positive")
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not self.ratio_set or min(self.ratio_set) <= 0:
            raise ValueError("ratio_set must be a nonempty set of positive ratios")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})

    def to_dict(self) -> dict:
        return {"step": self.step, "m": self.m, "v": self.v}

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerState":
        return cls(dict(d["m"]), dict(d["v"]), int(d["step"]))


# loss and optimizer -----------------------------------------------------------

def mse_loss(rendered, target):
    """Mean over all (variable, node) pairs of the squared difference.

    Accepts two FieldTensors (returns a float) or a Tensor and an array of the
    same shape (returns a scalar Tensor).
    """
    if isinstance(rendered, FieldTensor):
        if rendered.grid != target.grid or rendered.n_vars != target.n_vars:
            raise GridMismatchError(f"rendered {rendered.grid}/{rendered.n_vars} vs target {target.grid}/{target.n_vars}")
        d = rendered.values - target.values
        return float(np.mean(d * d))
    if tuple(rendered.shape) != tuple(np.shape(target)):
        raise GridMismatchError(f"rendered shape {rendered.shape} vs target {np.shape(target)}")
    d = rendered - target
    return ad.reduce_mean(d * d)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.iters:
        raise ValueError(f"step {step} outside [0, {cfg.iters}]")
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * step / cfg.iters))


def adamw_step(params: dict, grads: dict, state: OptimizerState, lr: float, cfg: TrainConfig,
               decay_mask: Optional[Callable[[str], bool]] = None):
    """One AdamW update in place; returns ``(params, state)``.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` before the
    adaptive step, skipped for names where ``no_decay`` holds.
    """
    skip = decay_mask or no_decay
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        if cfg.weight_decay and not skip(k):
            p -= p.dtype.type(lr * cfg.weight_decay) * p
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(p.dtype, copy=False)
    return params, state


def clip_global_norm(grads: dict, max_norm: Optional[float]) -> float:
    """Scale gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(s)
    return total


# datasets -----------------------------------------------------------------------

def restrict(values: np.ndarray, src: LatLonGrid, dst: LatLonGrid) -> np.ndarray:
    """Values of a ``(..., H, W)`` field on ``dst``: node selection when ``dst``
    nodes lie on ``src``, bilinear interpolation otherwise."""
    if src == dst:
        return values
    if is_refinement(dst, src):
        li = np.rint((dst.lats - src.lats[0]) / src.dlat).astype(int)
        lj = np.rint((dst.lons - src.lons[0]) / src.dlon).astype(int) % src.n_lon
        return values[..., li[:, None], lj[None, :]]
    lead = values.shape[:-2]
    flat = values.reshape((-1,) + values.shape[-2:])
    out = bilinear_interp(FieldTensor(src, flat), dst).values
    return out.reshape(lead + dst.shape)


class FieldDataset:
    """Multi-time physical fields on a high-resolution grid plus normalization.

    ``data`` is ``(T, N, H, W)``.  Inputs are degraded onto ``anchor`` by
    bilinear sampling; targets for ratio ``r`` live on ``refined_grid(anchor, r)``.
    """

    def __init__(self, data, grid: LatLonGrid, anchor: LatLonGrid, names=None,
                 splits: Optional[dict] = None, stats: Optional[NormStats] = None):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.ndim != 4 or self.data.shape[2:] != grid.shape:
            raise GridMismatchError(f"data {self.data.shape} does not match grid {grid}")
        self.grid = grid
        self.anchor = anchor
        self.names = list(names) if names is not None else [f"var{i}" for i in range(self.n_vars)]
        self.splits = splits or split_indices(self.n_time)
        self.stats = stats or compute_norm_stats(self.data, self.splits["train"])
        train = set(int(i) for i in self.splits["train"])
        self.norm = np.empty_like(self.data)
        for t in range(self.n_time):
            self.norm[t] = normalize(self.data[t], self.stats, clamp=t not in train)
        self._inputs = restrict(self.norm, grid, anchor) if is_refinement(anchor, grid) else np.stack(
            [make_lowres_input(FieldTensor(grid, self.norm[t]), anchor).values for t in range(self.n_time)])
        self._targets: dict = {}

    @property
    def n_time(self) -> int:
        return self.data.shape[0]

    @property
    def n_vars(self) -> int:
        return self.data.shape[1]

    def input(self, t: int) -> np.ndarray:
        return self._inputs[t]

    def target_grid(self, r: float) -> LatLonGrid:
        return refined_grid(self.anchor, r)

    def target(self, t: int, r: float) -> np.ndarray:
        key = float(r)
        if key not in self._targets:
            self._targets[key] = restrict(self.norm, self.grid, self.target_grid(r))
        return self._targets[key][t]

    def physical_target(self, t: int, r: float) -> np.ndarray:
        return restrict(self.data[t], self.grid, self.target_grid(r))

    def times(self, split: str, horizon: int = 0) -> np.ndarray:
        """Indices ``T`` in ``split`` with ``T + horizon`` also in the split."""
        idx = np.asarray(self.splits[split])
        members = set(int(i) for i in idx)
        return np.array([t for t in idx if int(t) + horizon in members], dtype=int)


def make_training_pair(dataset: FieldDataset, rng: np.random.Generator, cfg: TrainConfig):
    """Returns ``(input FieldTensor on the anchor grid, target FieldTensor, ratio)``."""
    horizon = 1 if cfg.mode == "forecast" else 0
    times = dataset.times("train", horizon)
    if len(times) == 0:
        raise DatasetTooShortError(f"no training time T with T+{horizon} available")
    r = cfg.ratio_set[int(rng.integers(len(cfg.ratio_set)))]
    t = int(times[int(rng.integers(len(times)))])
    tg = dataset.target_grid(r)
    return (FieldTensor(dataset.anchor, dataset.input(t)),
            FieldTensor(tg, dataset.target(t + horizon, r)), r)


# rendering helpers ----------------------------------------------------------------

def render_sample(dec: Decoded, b: int, grid: LatLonGrid, rcfg: RenderConfig) -> ad.Tensor:
    """Differentiable render of batch element ``b`` on ``grid``; output ``(N, H, W)``."""
    f = ad.getitem(dec.features, b)
    a = ad.getitem(dec.opacity, b)
    p = ad.getitem(dec.precision, b)
    nodes = grid.nodes()
    out = splat(f, a, p, dec.grid, nodes[:, 0], nodes[:, 1], rcfg, mu=dec.mu)
    return ad.reshape(ad.transpose(out), (f.shape[1],) + grid.shape)


# training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list = field(default_factory=list)


def _grads(leaves: dict) -> dict:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}


def _check_finite(step: int, loss: float, grads: dict) -> None:
    if not math.isfinite(loss):
        raise DivergenceError(step, loss)
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(step, float("nan"))


class _LossLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path is not None:
            self.path.write_text("")

    def write(self, step: int, lr: float, loss: float) -> None:
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(f"{step}\t{lr:.17g}\t{loss:.17g}\n")


def _checkpoint(model_cfg, params, opt, train_cfg, step, stats) -> Checkpoint:
    return Checkpoint(model_cfg.to_dict(), {k: v.copy() for k, v in params.items()},
                      {"step": opt.step, "m": {k: v.copy() for k, v in opt.m.items()},
                       "v": {k: v.copy() for k, v in opt.v.items()}},
                      train_cfg.to_dict(), step,
                      {"mins": stats.mins.copy(), "maxs": stats.maxs.copy()} if stats is not None else None)


def train(dataset: FieldDataset, model_cfg: ModelConfig, cfg: TrainConfig,
          log_path=None, ckpt_path=None, params: Optional[dict] = None,
          callback: Optional[Callable[[int, float], None]] = None,
          fixed_batch: bool = False) -> TrainResult:
    """Optimize the model on ``dataset``; returns the final checkpoint and losses.

    ``fixed_batch`` draws one batch up front and reuses it every step.
    """
    from .checkpoint import save_checkpoint

    if model_cfg.anchor != dataset.anchor.shape or model_cfg.n_vars != dataset.n_vars:
        raise GridMismatchError(f"model anchor {model_cfg.anchor}/{model_cfg.n_vars} vs dataset "
                                f"{dataset.anchor.shape}/{dataset.n_vars}")
    dtype = cfg.dtype
    model = GSSAViT(model_cfg)
    params = init_params(model_cfg, cfg.seed, dtype) if params is None else {k: v.astype(dtype) for k, v in params.items()}
    opt = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(cfg.seed)
    rcfg = RenderConfig(cfg.mahalanobis_cutoff)
    log = _LossLog(log_path)
    losses = []

    def draw():
        return [make_training_pair(dataset, rng, cfg) for _ in range(cfg.batch)]

    batch = draw() if fixed_batch else None
    for step in range(cfg.iters):
        lr = cosine_lr(step, cfg)
        pairs = batch if fixed_batch else draw()
        leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        try:
            x = np.stack([p[0].values for p in pairs]).astype(dtype)
            dec = model.forward(x, [p[2] for p in pairs], leaves)
            terms = [mse_loss(render_sample(dec, b, p[1].grid, rcfg), p[1].values.astype(dtype))
                     for b, p in enumerate(pairs)]
            loss = terms[0]
            for term in terms[1:]:
                loss = loss + term
            loss = loss * (1.0 / len(terms))
            ad.backward(loss)
        except NonFiniteError:
            raise DivergenceError(step, float("nan")) from None
        lval = float(loss.data)
        grads = _grads(leaves)
        _check_finite(step, lval, grads)
        clip_global_norm(grads, cfg.grad_clip)
        adamw_step(params, grads, opt, lr, cfg)
        losses.append(lval)
        log.write(step, lr, lval)
        if callback is not None:
            callback(step, lval)
        if ckpt_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(_checkpoint(model_cfg, params, opt, cfg, step + 1, dataset.stats), ckpt_path)
    ckpt = _checkpoint(model_cfg, params, opt, cfg, cfg.iters, dataset.stats)
    if ckpt_path:
        save_checkpoint(ckpt, ckpt_path)
    return TrainResult(ckpt, losses)


def _feedback(dec: Decoded, b: int, anchor: LatLonGrid, rcfg: RenderConfig) -> ad.Tensor:
    return render_sample(dec, b, anchor, rcfg)


def rollout(model: GSSAViT, params: dict, initial, steps: int, r: float,
            rcfg: RenderConfig = RenderConfig()) -> list:
    """Autoregressive forecast; returns ``steps`` normalized FieldTensors at ratio ``r``.

    Each step decodes Gaussians from the current anchor field, renders them
    on the target grid for output and on the anchor grid as the next input.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    anchor = model.cfg.anchor_grid
    target = refined_grid(anchor, r)
    x = initial.values if isinstance(initial, FieldTensor) else np.asarray(initial)
    dtype = next(iter(params.values())).dtype
    P = {k: ad.Tensor(v) for k, v in params.items()}
    outs = []
    for _ in range(steps):
        dec = model.forward(x[None].astype(dtype), [r], P)
        outs.append(FieldTensor(target, render_sample(dec, 0, target, rcfg).data.astype(np.float64)))
        if target == anchor:
            fb = outs[-1].values
        else:
            fb = _feedback(dec, 0, anchor, rcfg).data.astype(np.float64)
        x = np.clip(fb, 0.0, 1.0)
    return outs


def unrolled_loss(model: GSSAViT, P: dict, x0, targets: Sequence[np.ndarray], r: float,
                  target_grid: LatLonGrid, rcfg: RenderConfig) -> ad.Tensor:
    """Sum over steps of the MSE of an autoregressive chain, differentiable end to end."""
    x = x0 if isinstance(x0, ad.Tensor) else ad.Tensor(np.asarray(x0))
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    anchor = model.cfg.anchor_grid
    loss = None
    for s, tgt in enumerate(targets):
        dec = model.forward(x, [r], P)
        out = render_sample(dec, 0, target_grid, rcfg)
        term = mse_loss(out, np.asarray(tgt, dtype=out.dtype))
        loss = term if loss is None else loss + term
        if s + 1 < len(targets):
            fb = out if target_grid == anchor else _feedback(dec, 0, anchor, rcfg)
            x = ad.reshape(fb, (1,) + fb.shape)
    return loss


def finetune_rollout(ckpt: Checkpoint, dataset: FieldDataset, cfg: TrainConfig,
                     log_path=None, ckpt_path=None) -> TrainResult:
    """Continue training at constant ``lr_final`` on ``rollout_steps``-step unrolled losses."""
    from .checkpoint import save_checkpoint

    model_cfg = ModelConfig.from_dict(ckpt.model_config)
    model = GSSAViT(model_cfg)
    dtype = cfg.dtype
    params = {k: np.array(v, dtype=dtype) for k, v in ckpt.params.items()}
    opt = OptimizerState.from_dict(ckpt.optimizer)
    opt.m = {k: v.astype(dtype) for k, v in opt.m.items()}
    opt.v = {k: v.astype(dtype) for k, v in opt.v.items()}
    rng = np.random.default_rng(cfg.seed)
    rcfg = RenderConfig(cfg.mahalanobis_cutoff)
    n = cfg.rollout_steps
    times = dataset.times("train", n)
    if len(times) == 0:
        raise DatasetTooShortError(f"no training time T with T+{n} available")
    log = _LossLog(log_path)
    losses = []
    lr = cfg.lr_final
    for step in range(cfg.iters):
        r = cfg.ratio_set[int(rng.integers(len(cfg.ratio_set)))]
        t = int(times[int(rng.integers(len(times)))])
        tg = dataset.target_grid(r)
        leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        try:
            loss = unrolled_loss(model, leaves, dataset.input(t).astype(dtype),
                                 [dataset.target(t + s + 1, r) for s in range(n)], r, tg, rcfg)
            ad.backward(loss)
        except NonFiniteError:
            raise DivergenceError(step, float("nan")) from None
        lval = float(loss.data)
        grads = _grads(leaves)
        _check_finite(step, lval, grads)
        clip_global_norm(grads, cfg.grad_clip)
        adamw_step(params, grads, opt, lr, cfg)
        losses.append(lval)
        log.write(step, lr, lval)
    out = _checkpoint(model_cfg, params, opt, cfg, ckpt.step + cfg.iters,
                      NormStats(ckpt.norm_stats["mins"], ckpt.norm_stats["maxs"]) if ckpt.norm_stats else dataset.stats)
    if ckpt_path:
        save_checkpoint(out, ckpt_path)
    return TrainResult(out, losses)


def load_model(ckpt: Checkpoint):
    """``(GSSAViT, params, NormStats or None)`` from a checkpoint."""
    cfg = ModelConfig.from_dict(ckpt.model_config)
    stats = NormStats(ckpt.norm_stats["mins"], ckpt.norm_stats["maxs"]) if ckpt.norm_stats else None
    return GSSAViT(cfg), dict(ckpt.params), stats
