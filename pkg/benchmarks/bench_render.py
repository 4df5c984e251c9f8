"""Compare the compiled and pure-numpy splatting kernels.

Run ``python benchmarks/bench_render.py [--anchor 33x64] [--ratio 4] [--repeat 3]``.
Both backends render the same Gaussian set; the script reports the best wall
time per backend for the forward pass and the adjoint, plus the largest
difference between the two outputs.
"""

import argparse
import time

import numpy as np

from gssavit import _accel
from gssavit.gaussians import GaussianSet, init_gaussians_from_grid
from gssavit.grid import build_grid, refined_grid
from gssavit.render import splat_arrays, splat_arrays_backward


def make_set(anchor, n_vars, seed):
    rng = np.random.default_rng(seed)
    k = anchor.size
    q = rng.standard_normal((k, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sp = min(anchor.dlat, anchor.dlon)
    mu = init_gaussians_from_grid(anchor).mu
    return GaussianSet(anchor, mu, q, rng.uniform(0.3, 1.0, (k, 3)) * sp, rng.uniform(0.2, 0.95, k),
                       rng.uniform(0, 1, (k, n_vars)))


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--anchor", default="33x64")
    ap.add_argument("--ratio", type=float, default=4.0)
    ap.add_argument("--vars", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    anchor = build_grid(*(int(v) for v in args.anchor.split("x")))
    target = refined_grid(anchor, args.ratio)
    gs = make_set(anchor, args.vars, 0)
    nodes = target.nodes()
    gout = np.random.default_rng(1).standard_normal((len(nodes), args.vars))
    common = (anchor, gs.mu[:, :2], gs.precision(), gs.opacity, gs.features, nodes[:, 0], nodes[:, 1])

    backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    if "numba" in backends:  # compile outside the timed region
        splat_arrays(*common, backend="numba")
        splat_arrays_backward(*common, gout, backend="numba")
    print(f"anchor {anchor} ({anchor.size} Gaussians) -> target {target} ({target.size} points), {args.vars} vars")
    results = {}
    for be in backends:
        tf, fwd = best_of(lambda: splat_arrays(*common, backend=be)[0], args.repeat)
        tb, bwd = best_of(lambda: splat_arrays_backward(*common, gout, backend=be), args.repeat)
        results[be] = (fwd, bwd)
        print(f"{be:<6} forward {tf * 1e3:9.2f} ms   backward {tb * 1e3:9.2f} ms")
    if len(results) == 2:
        (f0, b0), (f1, b1) = results["numpy"], results["numba"]
        rel = max(np.max(np.abs(x - y)) / max(np.max(np.abs(x)), 1e-300) for x, y in zip(b0, b1))
        print(f"max |forward diff| {np.max(np.abs(f0 - f1)):.2e}, max relative adjoint diff {rel:.2e}")


if __name__ == "__main__":
    main()
