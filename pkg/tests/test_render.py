import math

import numpy as np
import pytest

from gssavit import _accel
from gssavit import autodiff as ad
from gssavit.gaussians import GaussianPrimitive, GaussianSet, build_covariance, init_gaussians_from_grid, wrap_lon
from gssavit.grid import FieldTensor, build_grid, refined_grid
from gssavit.render import (
    BRUTE_FORCE,
    RenderConfig,
    effective_opacity,
    overlap_set,
    render_backward,
    render_grid,
    render_point,
    render_points,
    splat_arrays,
    splat_arrays_backward,
)

backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])


def random_set(grid, rng, n_vars=2, smin=0.25, smax=1.0, jitter=0.0):
    k = grid.size
    q = rng.standard_normal((k, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sp = min(grid.dlat, grid.dlon)
    mu = init_gaussians_from_grid(grid).mu
    if jitter:
        mu[:, :2] += rng.uniform(-jitter, jitter, (k, 2)) * sp
    return GaussianSet(grid, mu, q, rng.uniform(smin, smax, (k, 3)) * sp,
                       rng.uniform(0.05, 0.95, k), rng.uniform(0, 1, (k, n_vars)))


def mahal2(g: GaussianPrimitive, p):
    """Full 3x3 quadratic form with dz = 0, via an explicit covariance inverse."""
    d = np.array([p[0] - g.mu[0], float(wrap_lon(p[1] - g.mu[1])), 0.0])
    return float(d @ np.linalg.inv(build_covariance(g.quat, g.scales)) @ d)


def oracle_point(gset, p, cutoff=math.inf):
    """Scalar compositing loop over every primitive in index order."""
    out = np.zeros(gset.n_vars)
    T = 1.0
    for g in gset:
        q = mahal2(g, p)
        if q > cutoff ** 2:
            continue
        a = g.opacity * math.exp(-0.5 * q)
        out += T * a * g.features
        T *= 1.0 - a
    return out


class TestRenderConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            RenderConfig(mahalanobis_cutoff=0.0)
        with pytest.raises(ValueError):
            RenderConfig(max_contributors=0)
        assert BRUTE_FORCE.brute_force and not RenderConfig().brute_force


class TestOverlapSet:
    def test_far_point_empty(self):
        g = build_grid(3, 4)
        gs = init_gaussians_from_grid(g, scales=(1.0, 1.0, 1.0))
        assert overlap_set(gs, (45.0, -135.0)) == []

    def test_contains_own_centre(self, rng):
        gs = random_set(build_grid(5, 8), rng)
        for j in [0, 7, 17, 39]:
            assert j in overlap_set(gs, gs.mu[j])

    def test_two_gaussians_match_distance_scan(self):
        g = build_grid(2, 2)
        mu = np.array([[-10.0, -5.0, 1.0], [10.0, 5.0, 1.0]])
        q = np.array([[1.0, 0.0, 0.0, 0.0], [np.cos(0.4), 0.0, 0.0, np.sin(0.4)]])
        gs = GaussianSet(g, mu, q, np.array([[8.0, 3.0, 1.0], [4.0, 9.0, 2.0]]), [0.8, 0.6], np.ones((2, 1)))
        for p in [(0.0, 0.0), (-5.0, -2.0), (20.0, 0.0), (0.0, 25.0), (-30.0, -5.0)]:
            want = [i for i in range(2) if math.sqrt(mahal2(gs[i], p)) <= 3.0]
            assert overlap_set(gs, p) == want

    def test_truncation(self, rng):
        gs = random_set(build_grid(5, 8), rng, smax=3.0)
        full = overlap_set(gs, (0.0, 0.0))
        assert overlap_set(gs, (0.0, 0.0), RenderConfig(max_contributors=2)) == full[:2]


class TestEffectiveOpacity:
    def _iso(self, sigma=2.0, alpha=0.7):
        return GaussianPrimitive(np.array([1.0, 0, 0, 0]), np.full(3, sigma), alpha, np.zeros(1),
                                 np.array([10.0, 20.0, 1.0]))

    def test_at_centre(self):
        assert effective_opacity(self._iso(), (10.0, 20.0)) == 0.7

    def test_quadratic_form_two(self):
        # d^T A d = 2 with sigma = 2 needs |d| = 2*sqrt(2)
        p = (10.0 + 2.0, 20.0 + 2.0)
        assert effective_opacity(self._iso(), p) == pytest.approx(0.7 * math.exp(-1.0), rel=1e-14)

    def test_three_sigma(self):
        assert effective_opacity(self._iso(), (10.0 + 6.0, 20.0)) == pytest.approx(0.7 * math.exp(-4.5), rel=1e-14)


class TestRenderPoint:
    def test_empty_is_zero(self):
        gs = init_gaussians_from_grid(build_grid(3, 4), scales=(1.0, 1.0, 1.0), n_vars=3)
        assert np.array_equal(render_point(gs, (45.0, -135.0)), np.zeros(3))

    def test_single_contributor(self):
        gs = init_gaussians_from_grid(build_grid(3, 4), scales=(5.0, 5.0, 5.0), n_vars=2)
        gs.features[:] = [[0.25, 0.75]]
        got = render_point(gs, (0.0, -90.0))
        assert np.allclose(got, 0.9 * np.array([0.25, 0.75]), rtol=0, atol=1e-15)

    def test_two_contributors(self):
        # four anchors; the last two are transparent
        g = build_grid(2, 2)
        gs = GaussianSet(g, np.array([[0.0, 0.0, 1.0], [0.0, 2.0, 1.0], [0.0, 90.0, 1.0], [0.0, -90.0, 1.0]]),
                         np.tile([1.0, 0, 0, 0], (4, 1)), np.full((4, 3), 2.0), [0.6, 0.5, 0.0, 0.0],
                         np.array([[1.0], [0.25], [0.0], [0.0]]))
        p = (0.0, 1.0)
        a1 = 0.6 * math.exp(-0.5 * 0.25)
        a2 = 0.5 * math.exp(-0.5 * 0.25)
        want = a1 * 1.0 + (1 - a1) * a2 * 0.25
        assert render_point(gs, p)[0] == pytest.approx(want, rel=1e-14)
        assert render_point(gs, p, BRUTE_FORCE)[0] == pytest.approx(oracle_point(gs, p)[0], rel=1e-13)

    @pytest.mark.parametrize("backend", backends)
    def test_matches_oracle(self, rng, backend):
        gs = random_set(build_grid(4, 6), rng, smax=2.0, jitter=0.3)
        for cutoff in (3.0, math.inf):
            cfg = RenderConfig(cutoff)
            pts = np.column_stack([rng.uniform(-90, 90, 40), rng.uniform(-180, 180, 40)])
            got = render_points(gs, pts[:, 0], pts[:, 1], cfg, backend=backend)
            want = np.array([oracle_point(gs, p, cutoff) for p in pts])
            assert np.allclose(got, want, rtol=1e-12, atol=1e-14)


class TestRenderGrid:
    def test_anchor_locality(self, rng):
        g = build_grid(5, 8)
        gs = init_gaussians_from_grid(g, scales=(0.05 * g.dlat,) * 3, opacity=0.95, n_vars=1)
        gs.features[:, 0] = rng.uniform(0, 1, g.size)
        out = render_grid(gs, g).values[0].ravel()
        assert np.allclose(out, 0.95 * gs.features[:, 0], rtol=0, atol=1e-12)

    def test_shared_coordinates_bit_identical(self, rng):
        g = build_grid(5, 8)
        gs = random_set(g, rng, smax=2.0)
        x2 = render_grid(gs, refined_grid(g, 2)).values
        x4 = render_grid(gs, refined_grid(g, 4)).values
        assert np.array_equal(x2, x4[:, ::2, ::2])

    def test_sparse_opacity_matches_oracle(self, rng):
        g = build_grid(3, 4)
        gs = random_set(g, rng, smin=2.0, smax=6.0)
        gs.opacity[:] = 0.0
        gs.opacity[[3, 8]] = [0.7, 0.4]
        t = build_grid(5, 8)
        got = render_grid(gs, t, BRUTE_FORCE).values
        for k, (la, lo) in enumerate(t.nodes()):
            assert np.allclose(got[:, k // 8, k % 8], oracle_point(gs, (la, lo)), rtol=1e-12, atol=1e-15)


class TestProperties:
    @pytest.mark.parametrize("backend", backends)
    def test_accumulated_opacity_bound(self, rng, backend):
        g = build_grid(9, 16)
        gs = random_set(g, rng, smax=3.0)
        gs.opacity[:] = rng.uniform(0.5, 1.0 - 1e-6, g.size)
        lat, lon = rng.uniform(-90, 90, 10_000), rng.uniform(-180, 180, 10_000)
        out, acc = render_points(gs, lat, lon, backend=backend, return_accumulated=True)
        assert np.all(acc >= 0) and np.all(acc < 1)
        assert np.all(out >= 0) and np.all(out <= gs.features.max(0) + 1e-15)

    def test_longitude_translation_bit_exact(self, rng):
        # dyadic coordinates so that adding 360 is itself exact
        g = build_grid(9, 16)
        gs = random_set(g, rng, smax=2.0)
        t = refined_grid(g, 4)
        nodes = t.nodes()
        shifted = gs.copy()
        shifted.mu[:, 1] += 360.0
        a = render_points(gs, nodes[:, 0], nodes[:, 1])
        b = render_points(shifted, nodes[:, 0], nodes[:, 1] + 360.0)
        assert np.array_equal(a, b)

    def test_culling_difference_bounded_by_excluded_opacity(self, rng):
        g = build_grid(9, 16)
        gs = random_set(g, rng)
        t = refined_grid(g, 4)
        nodes = t.nodes()
        diff = np.abs(render_points(gs, nodes[:, 0], nodes[:, 1]) -
                      render_points(gs, nodes[:, 0], nodes[:, 1], BRUTE_FORCE)).max(axis=1)
        prec = gs.precision()
        for k in rng.choice(len(nodes), 200, replace=False):
            d0 = nodes[k, 0] - gs.mu[:, 0]
            d1 = wrap_lon(nodes[k, 1] - gs.mu[:, 1])
            q = prec[:, 0] * d0 * d0 + 2 * prec[:, 1] * d0 * d1 + prec[:, 2] * d1 * d1
            excluded = np.sum(np.where(q > 9.0, gs.opacity * np.exp(-0.5 * q), 0.0))
            assert diff[k] <= excluded + 1e-15

    @pytest.mark.parametrize("backend", backends)
    def test_search_never_changes_culled_result(self, rng, backend):
        """The bucketed candidate search equals a full scan at the same cutoff, bit for bit."""
        from gssavit.render import _args, _kernels

        g = build_grid(17, 32)
        gs = random_set(g, rng, smin=0.1, smax=1.0, jitter=0.4)
        lat, lon = rng.uniform(-90, 90, 3000), rng.uniform(-180, 180, 3000)
        args = list(_args(g, gs.mu[:, :2], gs.precision(), gs.opacity, gs.features, lat, lon, RenderConfig()))
        assert args[4][7] == 0.0 and args[9] < g.size
        searched = _kernels(backend).render_forward(*args)[0]
        args[4] = args[4].copy()
        args[4][7] = 1.0  # every primitive is a candidate
        args[9] = g.size
        scanned = _kernels(backend).render_forward(*args)[0]
        assert np.array_equal(searched, scanned)

    def test_point_purity(self, rng):
        gs = random_set(build_grid(5, 8), rng, smax=2.0)
        lat, lon = rng.uniform(-90, 90, 50), rng.uniform(-180, 180, 50)
        batch = render_points(gs, lat, lon)
        single = np.array([render_point(gs, (a, b)) for a, b in zip(lat, lon)])
        assert np.array_equal(batch, single)


@pytest.mark.skipif(not _accel.NUMBA_AVAILABLE, reason="numba not installed")
class TestBackendParity:
    def test_forward(self, rng):
        gs = random_set(build_grid(9, 16), rng, smax=2.5, jitter=0.3)
        lat, lon = rng.uniform(-90, 90, 2000), rng.uniform(-180, 180, 2000)
        a = render_points(gs, lat, lon, backend="numba")
        b = render_points(gs, lat, lon, backend="numpy")
        assert np.max(np.abs(a - b)) < 1e-13

    def test_backward(self, rng):
        gs = random_set(build_grid(9, 16), rng, smax=2.5, jitter=0.3)
        lat, lon = rng.uniform(-90, 90, 500), rng.uniform(-180, 180, 500)
        gout = rng.standard_normal((500, gs.n_vars))
        args = (gs.grid, gs.mu[:, :2], gs.precision(), gs.opacity, gs.features, lat, lon, gout)
        for x, y in zip(splat_arrays_backward(*args, backend="numba"), splat_arrays_backward(*args, backend="numpy")):
            assert np.max(np.abs(x - y)) <= 1e-12 * np.max(np.abs(y))

    def test_thread_count_does_not_change_bits(self, rng):
        import numba

        gs = random_set(build_grid(9, 16), rng, smax=2.5)
        lat, lon = rng.uniform(-90, 90, 1000), rng.uniform(-180, 180, 1000)
        gout = rng.standard_normal((1000, gs.n_vars))
        args = (gs.grid, gs.mu[:, :2], gs.precision(), gs.opacity, gs.features, lat, lon)
        n0 = numba.get_num_threads()
        try:
            _accel.set_num_threads(1)
            f1 = splat_arrays(*args, backend="numba")[0]
            b1 = splat_arrays_backward(*args, gout, backend="numba")
            _accel.set_num_threads(numba.config.NUMBA_NUM_THREADS)
            f2 = splat_arrays(*args, backend="numba")[0]
            b2 = splat_arrays_backward(*args, gout, backend="numba")
        finally:
            numba.set_num_threads(n0)
        assert np.array_equal(f1, f2)
        assert all(np.array_equal(x, y) for x, y in zip(b1, b2))


class TestRenderBackward:
    def test_zero_upstream(self, rng):
        gs = random_set(build_grid(3, 4), rng)
        t = build_grid(5, 8)
        grads = render_backward(gs, t, RenderConfig(), FieldTensor(t, np.zeros((2, 5, 8))))
        assert all(np.all(v == 0) for v in grads.values())

    def test_feature_gradient_at_centre(self):
        g = build_grid(3, 4)
        gs = init_gaussians_from_grid(g, scales=(0.5, 0.5, 0.5), opacity=0.8, n_vars=1)
        gs.features[:] = 0.5
        # a query at node 5's centre; the other primitives are > 3 sigma away
        gout, _, _, _ = splat_arrays_backward(g, gs.mu[:, :2], gs.precision(), gs.opacity, gs.features,
                                              [0.0], [-90.0], np.ones((1, 1)))
        assert gout[5, 0] == 0.8
        assert np.count_nonzero(gout) == 1

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_difference(self, seed):
        rng = np.random.default_rng(seed)
        g = build_grid(3, 4)
        gs = random_set(g, rng, smin=0.5, smax=1.5)
        t = build_grid(5, 8)
        up = FieldTensor(t, rng.standard_normal((2, 5, 8)))
        from gssavit.gaussians import deactivate_arrays

        fl, qr, sr, ol = deactivate_arrays(gs.features, gs.quat, gs.scales, gs.opacity)
        qr = qr * rng.uniform(0.5, 2.0, (len(qr), 1))  # off the unit sphere, exercising normalization
        raw = dict(feature_logits=fl, quat_raw=qr, scale_raw=sr, opacity_logit=ol)
        grads = render_backward(gs, t, RenderConfig(), up, raw=raw)

        names = list(raw)

        def f(*ts):
            from gssavit.render import activate_tensors, splat

            feats, opac, prec = activate_tensors(*ts)
            nodes = t.nodes()
            out = splat(feats, opac, prec, g, nodes[:, 0], nodes[:, 1], RenderConfig(), mu=gs.mu[:, :2])
            return ad.reduce_sum(out * up.values.reshape(2, -1).T)

        rep = ad.grad_check(f, [raw[n] for n in names], h=1e-5, tol=1e-4)
        assert rep.passed, str(rep)
        # the checked adjoint is the one render_backward returns
        leaves = [ad.Tensor(raw[n].copy(), requires_grad=True) for n in names]
        ad.backward(f(*leaves))
        for n, t_ in zip(names, leaves):
            assert np.allclose(grads[n], t_.grad, rtol=1e-12, atol=1e-14)
