"""Compiled splatting kernels.

Every query point scans its candidate primitives in ascending index order,
so per-point results never depend on threading.  The backward pass reduces
per-chunk partial gradients in fixed chunk order.
"""

import numpy as np
from numba import njit, prange

N_CHUNKS = 64


@njit(cache=True, inline="always")
def _wrap(x):
    return (x + 180.0) % 360.0 - 180.0


@njit(cache=True)
def _gather(plat, plon, geo, cand):
    """Fill ``cand`` with candidate indices in ascending order; return count.

    ``geo`` = (n_lat, n_lon, lat0, dlat, lon0, dlon, radius, brute).
    """
    n_lat = int(geo[0])
    n_lon = int(geo[1])
    if geo[7] > 0.5:
        for i in range(n_lat * n_lon):
            cand[i] = i
        return n_lat * n_lon
    lat0, dlat, lon0, dlon, rad = geo[2], geo[3], geo[4], geo[5], geo[6]
    kmin = int(np.floor((plat - rad - lat0) / dlat)) - 1
    kmax = int(np.ceil((plat + rad - lat0) / dlat)) + 1
    if kmin < 0:
        kmin = 0
    if kmax > n_lat - 1:
        kmax = n_lat - 1
    u = (plon - lon0) % 360.0
    c0 = int(np.floor((u - rad) / dlon)) - 1
    c1 = int(np.ceil((u + rad) / dlon)) + 1
    n = 0
    all_cols = c1 - c0 + 1 >= n_lon
    for k in range(kmin, kmax + 1):
        base = k * n_lon
        if all_cols:
            for m in range(n_lon):
                cand[n] = base + m
                n += 1
            continue
        if c1 >= n_lon:
            for m in range(0, c1 - n_lon + 1):
                cand[n] = base + m
                n += 1
        lo = c0 if c0 > 0 else 0
        hi = c1 if c1 < n_lon - 1 else n_lon - 1
        for m in range(lo, hi + 1):
            cand[n] = base + m
            n += 1
        if c0 < 0:
            for m in range(c0 + n_lon, n_lon):
                cand[n] = base + m
                n += 1
    return n


@njit(cache=True, parallel=True)
def render_forward(mu, prec, opac, feat, geo, qlat, qlon, cutoff2, max_contrib, max_cand):
    n_pts = qlat.shape[0]
    n_var = feat.shape[1]
    out = np.zeros((n_pts, n_var))
    acc = np.zeros(n_pts)
    for p in prange(n_pts):
        cand = np.empty(max_cand, dtype=np.int64)
        nc = _gather(qlat[p], qlon[p], geo, cand)
        T = 1.0
        used = 0
        s = 0.0
        for j in range(nc):
            i = cand[j]
            d0 = qlat[p] - mu[i, 0]
            d1 = _wrap(qlon[p] - mu[i, 1])
            q = prec[i, 0] * d0 * d0 + 2.0 * prec[i, 1] * d0 * d1 + prec[i, 2] * d1 * d1
            if q <= cutoff2:
                ah = opac[i] * np.exp(-0.5 * q)
                w = T * ah
                for v in range(n_var):
                    out[p, v] += w * feat[i, v]
                s += w
                T = T * (1.0 - ah)
                used += 1
                if used == max_contrib:
                    break
        acc[p] = s
    return out, acc


@njit(cache=True, parallel=True)
def render_backward(mu, prec, opac, feat, geo, qlat, qlon, cutoff2, max_contrib, max_cand, gout):
    n_pts = qlat.shape[0]
    n_var = feat.shape[1]
    k = feat.shape[0]
    g_feat = np.zeros((N_CHUNKS, k, n_var))
    g_opac = np.zeros((N_CHUNKS, k))
    g_prec = np.zeros((N_CHUNKS, k, 3))
    g_mu = np.zeros((N_CHUNKS, k, 2))
    per = (n_pts + N_CHUNKS - 1) // N_CHUNKS
    for c in prange(N_CHUNKS):
        cand = np.empty(max_cand, dtype=np.int64)
        idx = np.empty(max_cand, dtype=np.int64)
        ahs = np.empty(max_cand)
        ts = np.empty(max_cand)
        es = np.empty(max_cand)
        d0s = np.empty(max_cand)
        d1s = np.empty(max_cand)
        carry = np.empty(n_var)
        for p in range(c * per, min((c + 1) * per, n_pts)):
            nc = _gather(qlat[p], qlon[p], geo, cand)
            T = 1.0
            used = 0
            for j in range(nc):
                i = cand[j]
                d0 = qlat[p] - mu[i, 0]
                d1 = _wrap(qlon[p] - mu[i, 1])
                q = prec[i, 0] * d0 * d0 + 2.0 * prec[i, 1] * d0 * d1 + prec[i, 2] * d1 * d1
                if q <= cutoff2:
                    e = np.exp(-0.5 * q)
                    ah = opac[i] * e
                    idx[used] = i
                    ahs[used] = ah
                    ts[used] = T
                    es[used] = e
                    d0s[used] = d0
                    d1s[used] = d1
                    T = T * (1.0 - ah)
                    used += 1
                    if used == max_contrib:
                        break
            for v in range(n_var):
                carry[v] = 0.0
            for j in range(used - 1, -1, -1):
                i = idx[j]
                ah = ahs[j]
                t = ts[j]
                gdiff = 0.0
                for v in range(n_var):
                    gdiff += gout[p, v] * (feat[i, v] - carry[v])
                    g_feat[c, i, v] += gout[p, v] * t * ah
                G = t * gdiff
                g_opac[c, i] += G * es[j]
                gq = -0.5 * G * ah
                d0 = d0s[j]
                d1 = d1s[j]
                g_prec[c, i, 0] += gq * d0 * d0
                g_prec[c, i, 1] += gq * 2.0 * d0 * d1
                g_prec[c, i, 2] += gq * d1 * d1
                g_mu[c, i, 0] -= gq * 2.0 * (prec[i, 0] * d0 + prec[i, 1] * d1)
                g_mu[c, i, 1] -= gq * 2.0 * (prec[i, 1] * d0 + prec[i, 2] * d1)
                for v in range(n_var):
                    carry[v] = ah * feat[i, v] + (1.0 - ah) * carry[v]
    rf = np.zeros((k, n_var))
    ro = np.zeros(k)
    rp = np.zeros((k, 3))
    rm = np.zeros((k, 2))
    for c in range(N_CHUNKS):
        rf += g_feat[c]
        ro += g_opac[c]
        rp += g_prec[c]
        rm += g_mu[c]
    return rf, ro, rp, rm
