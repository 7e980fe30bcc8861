"""Pure numpy implementation of the field kernels.

Mirrors :mod:`gsvr._core` signature for signature.  Pairs (point, candidate)
are expanded in chunks and reduced with ``np.bincount``, which adds in input
order, so per-point and per-primitive summation order matches the compiled
loops (point-major, ascending primitive id within a cell).
"""

import numpy as np

PSTRIDE = 20
GSTRIDE = 16

_CHUNK = 16384


def _cells_of(points, lo, h, dims):
    with np.errstate(invalid="ignore"):
        f = np.floor((points - lo) / h)
    f = np.nan_to_num(f, nan=0.0, posinf=0.0, neginf=0.0)
    idx = np.clip(f, 0, dims - 1).astype(np.int64)
    return (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]


def build_cells(centers, radii, lo, h, dims):
    centers = np.asarray(centers, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    lo = np.asarray(lo, dtype=np.float64)
    dims = np.asarray(dims, dtype=np.int64)
    ncell = int(np.prod(dims))
    J = centers.shape[0]
    if J == 0:
        return np.zeros(ncell + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)

    def axis_cell(x, k):
        return np.clip(np.floor((x - lo[k]) / h), 0, dims[k] - 1).astype(np.int64)

    lo_i = np.stack([axis_cell(centers[:, k] - radii, k) for k in range(3)], axis=1)
    hi_i = np.stack([axis_cell(centers[:, k] + radii, k) for k in range(3)], axis=1)
    span = int((hi_i - lo_i).max()) + 1
    off = np.arange(span)
    oa, ob, oc = np.meshgrid(off, off, off, indexing="ij")
    offs = np.stack([oa.ravel(), ob.ravel(), oc.ravel()], axis=1)

    # (J, span^3, 3) candidate cells, j-major so a stable sort keeps j ascending
    cand = lo_i[:, None, :] + offs[None, :, :]
    valid = np.all(cand <= hi_i[:, None, :], axis=2)
    blo = lo + cand * h
    bhi = lo + (cand + 1) * h
    blo = np.where(cand > 0, blo, -np.inf)
    bhi = np.where(cand < dims - 1, bhi, np.inf)
    mu = centers[:, None, :]
    gap = np.where(mu < blo, blo - mu, np.where(mu > bhi, mu - bhi, 0.0))
    d2 = np.sum(gap * gap, axis=2)
    valid &= d2 <= (radii * radii)[:, None]

    jj = np.broadcast_to(np.arange(J)[:, None], valid.shape)[valid]
    cells = ((cand[..., 0] * dims[1] + cand[..., 1]) * dims[2] + cand[..., 2])[valid]
    order = np.argsort(cells, kind="stable")
    items = jj[order].astype(np.int64)
    counts = np.bincount(cells, minlength=ncell)
    start = np.zeros(ncell + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    return start, items


def _pairs(start, items, lo, h, dims, pts):
    cells = _cells_of(pts, lo, h, dims)
    s = start[cells]
    cnt = start[cells + 1] - s
    total = int(cnt.sum())
    pidx = np.repeat(np.arange(len(pts)), cnt)
    first = np.repeat(np.cumsum(cnt) - cnt, cnt)
    pos = np.repeat(s, cnt) + (np.arange(total) - first)
    return pidx, items[pos]


def _local(prim, pts, pidx, jidx):
    d = pts[pidx] - prim[jidx, 0:3]
    keep = np.einsum("ij,ij->i", d, d) <= prim[jidx, 16]
    pidx, jidx, d = pidx[keep], jidx[keep], d[keep]
    R = prim[jidx, 3:12].reshape(-1, 3, 3)
    z = np.einsum("iab,ia->ib", R, d) * prim[jidx, 12:15]
    E = np.exp(-0.5 * np.einsum("ij,ij->i", z, z))
    return pidx, jidx, d, R, z, E


def field_forward(prim, start, items, lo, h, dims, points, out, nchunks=1):
    prim = np.asarray(prim)
    lo = np.asarray(lo)
    dims = np.asarray(dims)
    points = np.asarray(points)
    finite = np.all(np.isfinite(points), axis=1)
    for c0 in range(0, len(points), _CHUNK):
        pts = points[c0:c0 + _CHUNK]
        pidx, jidx = _pairs(start, items, lo, h, dims, pts)
        pidx, jidx, _, _, _, E = _local(prim, pts, pidx, jidx)
        vals = np.bincount(pidx, weights=prim[jidx, 15] * E, minlength=len(pts))
        out[c0:c0 + len(pts)] = np.where(finite[c0:c0 + _CHUNK], vals, 0.0)


def field_backward(prim, start, items, lo, h, dims, points, upstream, acc,
                   spatial, want_spatial):
    prim = np.asarray(prim)
    lo = np.asarray(lo)
    dims = np.asarray(dims)
    points = np.asarray(points)
    upstream = np.asarray(upstream)
    J = prim.shape[0]
    nchunks = acc.shape[0]
    n = len(points)
    step = (n + nchunks - 1) // nchunks if n else 0
    finite = np.all(np.isfinite(points), axis=1)
    for p0 in range(0, n, _CHUNK):
        pts = points[p0:p0 + _CHUNK]
        m = len(pts)
        pidx, jidx = _pairs(start, items, lo, h, dims, pts)
        ok = finite[p0 + pidx]
        pidx, jidx, d, R, z, E = _local(prim, pts, pidx[ok], jidx[ok])
        G = prim[jidx, 15] * E
        w = z * prim[jidx, 12:15]
        a = np.einsum("iab,ib->ia", R, w)
        if want_spatial:
            for k in range(3):
                spatial[p0:p0 + m, k] = -np.bincount(pidx, weights=G * a[:, k], minlength=m)
        g = upstream[p0 + pidx]
        nz = g != 0.0
        pidx, jidx, d, z, E, G, w, a, g = (
            pidx[nz], jidx[nz], d[nz], z[nz], E[nz], G[nz], w[nz], a[nz], g[nz])
        gG = g * G
        cols = [g * E]
        cols += [gG * a[:, k] for k in range(3)]
        cols += [gG * z[:, k] * z[:, k] for k in range(3)]
        cols += [-gG * d[:, r] * w[:, c] for r in range(3) for c in range(3)]
        chunk = (p0 + pidx) // step if nchunks > 1 else np.zeros(len(pidx), dtype=np.int64)
        for c in np.unique(chunk):
            sel = chunk == c
            for k, col in enumerate(cols):
                acc[c, :, k] += np.bincount(jidx[sel], weights=col[sel], minlength=J)
