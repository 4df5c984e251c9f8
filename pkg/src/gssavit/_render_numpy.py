"""Pure-numpy splatting kernels, vectorized over query points.

Candidates are gathered into a ``(P, C)`` index table sorted ascending, then
composited one slot at a time so the per-point operation order matches the
compiled kernels.
"""

import numpy as np


def _wrap(x):
    return np.mod(x + 180.0, 360.0) - 180.0


def gather(geo, qlat, qlon):
    n_lat, n_lon = int(geo[0]), int(geo[1])
    k = n_lat * n_lon
    n_pts = len(qlat)
    if geo[7] > 0.5:
        return np.broadcast_to(np.arange(k, dtype=np.int64), (n_pts, k))
    lat0, dlat, lon0, dlon, rad = geo[2:7]
    kmin = np.floor((qlat - rad - lat0) / dlat).astype(np.int64) - 1
    kmax = np.ceil((qlat + rad - lat0) / dlat).astype(np.int64) + 1
    kmin = np.maximum(kmin, 0)
    kmax = np.minimum(kmax, n_lat - 1)
    u = np.mod(qlon - lon0, 360.0)
    c0 = np.floor((u - rad) / dlon).astype(np.int64) - 1
    c1 = np.ceil((u + rad) / dlon).astype(np.int64) + 1
    nrows = int(max((kmax - kmin).max(initial=0) + 1, 1))
    rows = kmin[:, None] + np.arange(nrows)
    row_ok = rows <= kmax[:, None]
    if int((c1 - c0).max(initial=0)) + 1 >= n_lon:
        cols = np.broadcast_to(np.arange(n_lon), (n_pts, n_lon))
        col_ok = np.ones((n_pts, n_lon), dtype=bool)
    else:
        ncols = int((c1 - c0).max(initial=0)) + 1
        cols = c0[:, None] + np.arange(ncols)
        col_ok = cols <= c1[:, None]
        cols = np.mod(cols, n_lon)
    idx = rows[:, :, None] * n_lon + cols[:, None, :]
    ok = row_ok[:, :, None] & col_ok[:, None, :]
    idx = np.where(ok, idx, k).reshape(n_pts, -1)
    return np.sort(idx, axis=1)


def _slots(mu, prec, opac, geo, qlat, qlon, cutoff2, max_contrib):
    """Yield per-slot (indices, use-mask, d0, d1, e) in compositing order."""
    cand = gather(geo, qlat, qlon)
    k = len(opac)
    used = np.zeros(len(qlat), dtype=np.int64)
    for s in range(cand.shape[1]):
        i = cand[:, s]
        valid = i < k
        ii = np.where(valid, i, 0)
        d0 = qlat - mu[ii, 0]
        d1 = _wrap(qlon - mu[ii, 1])
        q = prec[ii, 0] * d0 * d0 + 2.0 * prec[ii, 1] * d0 * d1 + prec[ii, 2] * d1 * d1
        use = valid & (q <= cutoff2)
        if max_contrib > 0:
            use &= used < max_contrib
        used += use
        e = np.where(use, np.exp(-0.5 * np.where(use, q, 0.0)), 0.0)
        yield ii, use, d0, d1, e


def render_forward(mu, prec, opac, feat, geo, qlat, qlon, cutoff2, max_contrib, max_cand=None):
    n_pts = len(qlat)
    out = np.zeros((n_pts, feat.shape[1]))
    acc = np.zeros(n_pts)
    T = np.ones(n_pts)
    for ii, use, _, _, e in _slots(mu, prec, opac, geo, qlat, qlon, cutoff2, max_contrib):
        if not use.any():
            continue
        ah = np.where(use, opac[ii] * e, 0.0)
        w = T * ah
        out += np.where(use[:, None], w[:, None] * feat[ii], 0.0)
        acc += w
        T = np.where(use, T * (1.0 - ah), T)
    return out, acc


def render_backward(mu, prec, opac, feat, geo, qlat, qlon, cutoff2, max_contrib, max_cand, gout):
    n_pts = len(qlat)
    k, n_var = feat.shape
    rec = []
    T = np.ones(n_pts)
    for ii, use, d0, d1, e in _slots(mu, prec, opac, geo, qlat, qlon, cutoff2, max_contrib):
        if not use.any():
            continue
        ah = np.where(use, opac[ii] * e, 0.0)
        rec.append((ii, use, d0, d1, e, ah, T))
        T = np.where(use, T * (1.0 - ah), T)
    g_feat = np.zeros((k, n_var))
    g_opac = np.zeros(k)
    g_prec = np.zeros((k, 3))
    g_mu = np.zeros((k, 2))
    carry = np.zeros((n_pts, n_var))
    for ii, use, d0, d1, e, ah, t in reversed(rec):
        f = feat[ii]
        G = t * np.sum(gout * (f - carry), axis=1)
        sel = np.nonzero(use)[0]
        tgt = ii[sel]
        np.add.at(g_feat, tgt, gout[sel] * (t * ah)[sel, None])
        np.add.at(g_opac, tgt, (G * e)[sel])
        gq = -0.5 * G * ah
        np.add.at(g_prec, tgt, np.stack([gq * d0 * d0, gq * 2.0 * d0 * d1, gq * d1 * d1], axis=1)[sel])
        p0, p1, p2 = prec[ii, 0], prec[ii, 1], prec[ii, 2]
        np.add.at(g_mu, tgt, np.stack([-gq * 2.0 * (p0 * d0 + p1 * d1),
                                       -gq * 2.0 * (p1 * d0 + p2 * d1)], axis=1)[sel])
        carry = np.where(use[:, None], ah[:, None] * f + (1.0 - ah[:, None]) * carry, carry)
    return g_feat, g_opac, g_prec, g_mu
