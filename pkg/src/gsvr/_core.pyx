# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for evaluating and differentiating the Gaussian field.

Every routine here has a numpy twin in :mod:`gsvr._core_py` with the same
signature; :mod:`gsvr.kernels` picks one at import time.

Primitive rows are packed by :func:`gsvr.gaussians.pack_primitives`:

    [0:3] center, [3:12] rotation (row major), [12:15] 1/scale,
    [15] intensity, [16] squared support radius
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, floor, INFINITY

cnp.import_array()

DEF PSTRIDE = 20
DEF GSTRIDE = 16


cdef inline Py_ssize_t _cell_axis(double x, double lo, double h, Py_ssize_t n) noexcept nogil:
    cdef double f = floor((x - lo) / h)
    if f < 0.0:
        return 0
    if f > n - 1:
        return n - 1
    return <Py_ssize_t>f


def build_cells(const double[:, ::1] centers, const double[::1] radii,
                const double[::1] lo, double h, const cnp.int64_t[::1] dims):
    """Register every primitive in each cell its support ball touches.

    Border cells are treated as extending to infinity outward, so a point
    clamped into a border cell still finds every ball that contains it.
    """
    cdef Py_ssize_t J = centers.shape[0]
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t ncell = nx * ny * nz
    cdef cnp.int64_t[::1] start = np.zeros(ncell + 1, dtype=np.int64)
    cdef Py_ssize_t j, a, b, c, k, pass_, cell
    cdef Py_ssize_t lo_i[3]
    cdef Py_ssize_t hi_i[3]
    cdef Py_ssize_t nn[3]
    cdef double r, d2, t, blo, bhi
    cdef double mu[3]
    cdef cnp.int64_t[::1] fill
    cdef cnp.int64_t[::1] items = np.zeros(0, dtype=np.int64)
    nn[0] = nx
    nn[1] = ny
    nn[2] = nz

    for pass_ in range(2):
        if pass_ == 1:
            for cell in range(ncell):
                start[cell + 1] += start[cell]
            items = np.empty(start[ncell], dtype=np.int64)
            fill = np.array(start[:ncell], dtype=np.int64)
        for j in range(J):
            r = radii[j]
            for k in range(3):
                mu[k] = centers[j, k]
                lo_i[k] = _cell_axis(mu[k] - r, lo[k], h, nn[k])
                hi_i[k] = _cell_axis(mu[k] + r, lo[k], h, nn[k])
            for a in range(lo_i[0], hi_i[0] + 1):
                for b in range(lo_i[1], hi_i[1] + 1):
                    for c in range(lo_i[2], hi_i[2] + 1):
                        d2 = 0.0
                        for k in range(3):
                            if k == 0:
                                cell = a
                            elif k == 1:
                                cell = b
                            else:
                                cell = c
                            blo = lo[k] + cell * h if cell > 0 else -INFINITY
                            bhi = lo[k] + (cell + 1) * h if cell < nn[k] - 1 else INFINITY
                            if mu[k] < blo:
                                t = blo - mu[k]
                                d2 += t * t
                            elif mu[k] > bhi:
                                t = mu[k] - bhi
                                d2 += t * t
                        if d2 > r * r:
                            continue
                        cell = (a * ny + b) * nz + c
                        if pass_ == 0:
                            start[cell + 1] += 1
                        else:
                            items[fill[cell]] = j
                            fill[cell] += 1
    return np.asarray(start), np.asarray(items)


cdef void _forward_range(const double[:, ::1] prim, const cnp.int64_t[::1] start,
                         const cnp.int64_t[::1] items, const double[::1] lo, double h,
                         Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                         const double[:, ::1] points, double[::1] out,
                         Py_ssize_t p0, Py_ssize_t p1) noexcept nogil:
    cdef Py_ssize_t p, idx, j, cell
    cdef double x0, x1, x2, d0, d1, d2, u0, u1, u2, e, acc
    for p in range(p0, p1):
        x0 = points[p, 0]
        x1 = points[p, 1]
        x2 = points[p, 2]
        acc = 0.0
        if x0 == x0 and x1 == x1 and x2 == x2:
            cell = (_cell_axis(x0, lo[0], h, nx) * ny
                    + _cell_axis(x1, lo[1], h, ny)) * nz + _cell_axis(x2, lo[2], h, nz)
            for idx in range(start[cell], start[cell + 1]):
                j = items[idx]
                d0 = x0 - prim[j, 0]
                d1 = x1 - prim[j, 1]
                d2 = x2 - prim[j, 2]
                if d0 * d0 + d1 * d1 + d2 * d2 > prim[j, 16]:
                    continue
                u0 = (prim[j, 3] * d0 + prim[j, 6] * d1 + prim[j, 9] * d2) * prim[j, 12]
                u1 = (prim[j, 4] * d0 + prim[j, 7] * d1 + prim[j, 10] * d2) * prim[j, 13]
                u2 = (prim[j, 5] * d0 + prim[j, 8] * d1 + prim[j, 11] * d2) * prim[j, 14]
                e = -0.5 * (u0 * u0 + u1 * u1 + u2 * u2)
                acc += prim[j, 15] * exp(e)
        out[p] = acc


def field_forward(const double[:, ::1] prim, const cnp.int64_t[::1] start,
                  const cnp.int64_t[::1] items, const double[::1] lo, double h,
                  const cnp.int64_t[::1] dims, const double[:, ::1] points,
                  double[::1] out, int nchunks=1):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t c, step
    if nchunks < 1:
        nchunks = 1
    step = (n + nchunks - 1) // nchunks
    if nchunks == 1:
        with nogil:
            _forward_range(prim, start, items, lo, h, nx, ny, nz, points, out, 0, n)
    else:
        for c in prange(nchunks, nogil=True, schedule="static"):
            _forward_range(prim, start, items, lo, h, nx, ny, nz, points, out,
                           c * step, min((c + 1) * step, n))


cdef void _backward_range(const double[:, ::1] prim, const cnp.int64_t[::1] start,
                          const cnp.int64_t[::1] items, const double[::1] lo, double h,
                          Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                          const double[:, ::1] points, const double[::1] upstream,
                          double[:, ::1] acc, double[:, ::1] spatial, bint want_spatial,
                          Py_ssize_t p0, Py_ssize_t p1) noexcept nogil:
    cdef Py_ssize_t p, idx, j, cell
    cdef double x0, x1, x2, d0, d1, d2, z0, z1, z2, w0, w1, w2
    cdef double g, E, G, gG, a0, a1, a2, s0, s1, s2
    for p in range(p0, p1):
        g = upstream[p]
        x0 = points[p, 0]
        x1 = points[p, 1]
        x2 = points[p, 2]
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        if (g != 0.0 or want_spatial) and x0 == x0 and x1 == x1 and x2 == x2:
            cell = (_cell_axis(x0, lo[0], h, nx) * ny
                    + _cell_axis(x1, lo[1], h, ny)) * nz + _cell_axis(x2, lo[2], h, nz)
            for idx in range(start[cell], start[cell + 1]):
                j = items[idx]
                d0 = x0 - prim[j, 0]
                d1 = x1 - prim[j, 1]
                d2 = x2 - prim[j, 2]
                if d0 * d0 + d1 * d1 + d2 * d2 > prim[j, 16]:
                    continue
                z0 = (prim[j, 3] * d0 + prim[j, 6] * d1 + prim[j, 9] * d2) * prim[j, 12]
                z1 = (prim[j, 4] * d0 + prim[j, 7] * d1 + prim[j, 10] * d2) * prim[j, 13]
                z2 = (prim[j, 5] * d0 + prim[j, 8] * d1 + prim[j, 11] * d2) * prim[j, 14]
                E = exp(-0.5 * (z0 * z0 + z1 * z1 + z2 * z2))
                G = prim[j, 15] * E
                # w = S^-2 R^T d ; R w = Sigma^-1 d
                w0 = z0 * prim[j, 12]
                w1 = z1 * prim[j, 13]
                w2 = z2 * prim[j, 14]
                a0 = prim[j, 3] * w0 + prim[j, 4] * w1 + prim[j, 5] * w2
                a1 = prim[j, 6] * w0 + prim[j, 7] * w1 + prim[j, 8] * w2
                a2 = prim[j, 9] * w0 + prim[j, 10] * w1 + prim[j, 11] * w2
                if want_spatial:
                    s0 = s0 - G * a0
                    s1 = s1 - G * a1
                    s2 = s2 - G * a2
                if g == 0.0:
                    continue
                gG = g * G
                acc[j, 0] += g * E
                acc[j, 1] += gG * a0
                acc[j, 2] += gG * a1
                acc[j, 3] += gG * a2
                acc[j, 4] += gG * z0 * z0
                acc[j, 5] += gG * z1 * z1
                acc[j, 6] += gG * z2 * z2
                acc[j, 7] -= gG * d0 * w0
                acc[j, 8] -= gG * d0 * w1
                acc[j, 9] -= gG * d0 * w2
                acc[j, 10] -= gG * d1 * w0
                acc[j, 11] -= gG * d1 * w1
                acc[j, 12] -= gG * d1 * w2
                acc[j, 13] -= gG * d2 * w0
                acc[j, 14] -= gG * d2 * w1
                acc[j, 15] -= gG * d2 * w2
        if want_spatial:
            spatial[p, 0] = s0
            spatial[p, 1] = s1
            spatial[p, 2] = s2


def field_backward(const double[:, ::1] prim, const cnp.int64_t[::1] start,
                   const cnp.int64_t[::1] items, const double[::1] lo, double h,
                   const cnp.int64_t[::1] dims, const double[:, ::1] points,
                   const double[::1] upstream, double[:, :, ::1] acc,
                   double[:, ::1] spatial, bint want_spatial):
    """Accumulate raw per-primitive gradients into ``acc[chunk]``.

    ``acc`` has shape (nchunks, J, 16); chunk c owns a contiguous block of
    points and its own buffer, so the caller's ordered reduction over the
    first axis is deterministic whatever the thread count.
    """
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t nchunks = acc.shape[0]
    cdef Py_ssize_t c, step = (n + nchunks - 1) // nchunks
    if nchunks == 1:
        with nogil:
            _backward_range(prim, start, items, lo, h, nx, ny, nz, points, upstream,
                            acc[0], spatial, want_spatial, 0, n)
    else:
        for c in prange(nchunks, nogil=True, schedule="static"):
            _backward_range(prim, start, items, lo, h, nx, ny, nz, points, upstream,
                            acc[c], spatial, want_spatial,
                            c * step, min((c + 1) * step, n))
