"""Finite-difference gradient suites used by ``gssavit gradcheck``.

Every suite runs in double precision and returns a list of
:class:`~gssavit.autodiff.GradCheckReport`.  Ops are looked up on the
``autodiff`` module at call time, so a patched op is what gets checked.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .gaussians import anchor_positions, inverse_softplus
from .grid import build_grid, refined_grid
from .model import GSSAViT, ModelConfig, init_params
from .render import BRUTE_FORCE, activate_tensors, splat
from .train import mse_loss, render_sample, unrolled_loss

PRIMITIVE_TOL = 1e-5
RENDER_TOL = 1e-4
MODEL_TOL = 1e-4
ROLLOUT_TOL = 1e-3


def _proj(out: ad.Tensor, rng) -> ad.Tensor:
    """Scalarize with a fixed random projection so every output entry matters."""
    c = rng.standard_normal(out.shape)
    return ad.reduce_sum(ad.mul(out, c))


def _primitive_cases(rng) -> list:
    """``(name, fn, inputs)`` triples; ``fn`` maps tensors to a tensor."""
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    row = rng.standard_normal((4,))
    # gelu' vanishes near x = -0.752, where relative error is ill-conditioned
    gx = np.where(rng.random((3, 4)) < 0.5, rng.uniform(-0.5, 3.0, (3, 4)), rng.uniform(-4.0, -1.0, (3, 4)))
    return [
        ("add", lambda a, b: ad.add(a, b), [x, row]),
        ("sub", lambda a, b: ad.sub(a, b), [x, row]),
        ("mul", lambda a, b: ad.mul(a, b), [x, y]),
        ("div", lambda a, b: ad.div(a, b), [x, pos]),
        ("neg", lambda a: ad.neg(a), [x]),
        ("exp", lambda a: ad.exp(a), [x]),
        ("log", lambda a: ad.log(a), [pos]),
        ("sqrt", lambda a: ad.sqrt(a), [pos]),
        ("power", lambda a: ad.power(a, 2.5), [pos]),
        ("sigmoid", lambda a: ad.sigmoid(a), [x]),
        ("softplus", lambda a: ad.softplus(a), [x * 3.0]),
        ("gelu", lambda a: ad.gelu(a), [gx]),
        ("matmul", lambda a, b: ad.matmul(a, b), [rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]),
        ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), [rng.standard_normal((2, 3, 4))]),
        ("reshape", lambda a: ad.reshape(a, (2, 6)), [x]),
        ("getitem", lambda a: ad.getitem(a, (np.array([0, 2, 2]), slice(1, 3))), [x]),
        ("slice", lambda a: ad.slice_axis(a, 1, 3, axis=1), [x]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [x, y]),
        ("stack", lambda a, b: ad.stack([a, b], axis=0), [x, y]),
        ("sum", lambda a: ad.reduce_sum(a, axis=0, keepdims=True), [x]),
        ("mean", lambda a: ad.reduce_mean(a, axis=1), [x]),
        ("softmax", lambda a: ad.softmax(a, axis=-1), [x]),
        ("layer_norm", lambda a, g, b: ad.layer_norm(a, g, b), [x, rng.standard_normal(4), row]),
    ]


def primitive_suite(seed: int = 0) -> list:
    reports = []
    for name, fn, inputs in _primitive_cases(np.random.default_rng(seed)):
        prng_seed = seed + 1

        def f(*ts, fn=fn, prng_seed=prng_seed):
            return _proj(fn(*ts), np.random.default_rng(prng_seed))

        reports.append(ad.grad_check(f, inputs, tol=PRIMITIVE_TOL, name=name))
    return reports


def renderer_suite(seed: int = 0) -> list:
    """Adjoint of activation + splatting w.r.t. raw outputs and centres."""
    rng = np.random.default_rng(seed)
    anchor = build_grid(4, 6)
    k = anchor.size
    target = refined_grid(anchor, 2)
    nodes = target.nodes()
    fl = rng.standard_normal((k, 2))
    qr = rng.standard_normal((k, 4))
    sr = rng.uniform(2.0, 4.0, (k, 3)) * 10.0
    ol = rng.standard_normal(k)
    mu = anchor_positions(anchor)[:, :2] + rng.uniform(-5.0, 5.0, (k, 2))
    c = rng.standard_normal((len(nodes), 2))

    def f(fl_, qr_, sr_, ol_, mu_):
        feats, opac, prec = activate_tensors(fl_, qr_, sr_, ol_)
        out = splat(feats, opac, prec, anchor, nodes[:, 0], nodes[:, 1], BRUTE_FORCE, mu=mu_)
        return ad.reduce_sum(ad.mul(out, c))

    return [ad.grad_check(f, [fl, qr, inverse_softplus(sr), ol, mu], tol=RENDER_TOL, name="render")]


def tiny_model(seed: int = 0, learnable_positions: bool = True):
    cfg = ModelConfig(n_vars=2, anchor=(3, 4), embed_dim=8, layers=1, heads=2, window=(3, 2),
                      learnable_positions=learnable_positions, init_std=0.3)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    # move every parameter off its special initial value so all paths carry gradient
    for k, v in params.items():
        params[k] = v + 0.1 * rng.standard_normal(v.shape)
    if learnable_positions:
        params["mu_offset"] = rng.uniform(-10.0, 10.0, params["mu_offset"].shape)
    return GSSAViT(cfg), params


def checked_names(params: dict) -> list:
    """Parameters with a nonzero gradient.  Key biases shift every attention
    score of a query equally, which softmax ignores, so their exact gradient is
    zero and a finite difference there only measures rounding noise."""
    return sorted(n for n in params if not n.endswith(".k.b"))


def model_suite(seed: int = 0, max_coords: int = 6) -> list:
    """End-to-end model + render + MSE loss."""
    model, params = tiny_model(seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(size=(1, 2, 3, 4))
    target = refined_grid(model.cfg.anchor_grid, 2)
    y = rng.uniform(size=(2,) + target.shape)
    names = checked_names(params)

    def f(*ts):
        P = {**{k: ad.Tensor(v) for k, v in params.items()}, **dict(zip(names, ts))}
        dec = model.forward(x, [2.0], P)
        return mse_loss(render_sample(dec, 0, target, BRUTE_FORCE), y)

    return [ad.grad_check(f, [params[n] for n in names], tol=MODEL_TOL, name="model+render+loss",
                          max_coords=max_coords, rng=np.random.default_rng(seed))]


def rollout_suite(steps: int = 3, seed: int = 0, max_coords: int = 4) -> list:
    """Gradient through an unrolled ``steps``-step autoregressive chain."""
    model, params = tiny_model(seed)
    rng = np.random.default_rng(seed + 2)
    target = refined_grid(model.cfg.anchor_grid, 2)
    ys = [rng.uniform(size=(2,) + target.shape) for _ in range(steps)]
    names = checked_names(params)
    x0 = rng.uniform(size=(2, 3, 4))

    def f(*ts):
        P = {**{k: ad.Tensor(v) for k, v in params.items()}, **dict(zip(names, ts))}
        return unrolled_loss(model, P, x0, ys, 2.0, target, BRUTE_FORCE)

    return [ad.grad_check(f, [params[n] for n in names], tol=ROLLOUT_TOL, name=f"rollout-{steps}",
                          max_coords=max_coords, rng=np.random.default_rng(seed))]


@dataclass
class Suite:
    name: str
    run: Callable[[], list]
    full_only: bool


SUITES = [
    Suite("primitives", primitive_suite, False),
    Suite("renderer", renderer_suite, True),
    Suite("model", model_suite, True),
    Suite("rollout-3", lambda: rollout_suite(3), True),
    Suite("rollout-12", lambda: rollout_suite(12, max_coords=2), True),
]


def run_suites(full: bool = False) -> list:
    """``[(suite name, reports)]`` for the default or full selection."""
    return [(s.name, s.run()) for s in SUITES if full or not s.full_only]
