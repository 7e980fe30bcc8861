"""Gaussian-primitive volume: storage, bounded-support evaluation, gradients.

A volume is the truncated sum

    V(x) = sum_j I_j exp(-1/2 (x - mu_j)^T Sigma_j^-1 (x - mu_j)),
    Sigma_j = R_j S_j^2 R_j^T,

where only primitives with ``|x - mu_j| <= 3 max(S_j)`` contribute.  Points
are routed through a uniform grid (:class:`SpatialIndex`) so each query only
visits nearby primitives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .rigid import quat_normalize, quat_to_matrix
from .volume import GridSpec, VoxelVolume

CUTOFF = 3.0
PSTRIDE = 20
GSTRIDE = 16


@dataclass
class GaussianSet:
    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.intensities = np.ascontiguousarray(self.intensities, dtype=np.float64).reshape(-1)
        J = len(self.centers)
        if not (len(self.rotations) == len(self.log_scales) == len(self.intensities) == J):
            raise ValueError("GaussianSet arrays must all have length J")

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    @classmethod
    def isotropic(cls, centers, scale, intensities) -> "GaussianSet":
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        J = len(centers)
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (J, 1))
        ls = np.log(np.broadcast_to(np.asarray(scale, dtype=np.float64), (J,)))
        return cls(centers, rot, np.repeat(ls[:, None], 3, axis=1),
                   np.broadcast_to(intensities, (J,)).astype(np.float64))

    @property
    def count(self) -> int:
        return len(self.centers)

    def __len__(self):
        return self.count

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def support_radii(self) -> np.ndarray:
        return CUTOFF * self.scales.max(axis=1) if self.count else np.zeros(0)

    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations) if self.count else np.zeros((0, 3, 3))

    def covariances(self) -> np.ndarray:
        R = self.rotation_matrices()
        return np.einsum("jab,jb,jcb->jac", R, self.scales ** 2, R)

    def copy(self) -> "GaussianSet":
        return GaussianSet(self.centers.copy(), self.rotations.copy(),
                           self.log_scales.copy(), self.intensities.copy())

    def subset(self, idx) -> "GaussianSet":
        return GaussianSet(self.centers[idx], self.rotations[idx],
                           self.log_scales[idx], self.intensities[idx])

    def concatenate(self, other: "GaussianSet") -> "GaussianSet":
        return GaussianSet(np.vstack([self.centers, other.centers]),
                           np.vstack([self.rotations, other.rotations]),
                           np.vstack([self.log_scales, other.log_scales]),
                           np.concatenate([self.intensities, other.intensities]))

    def normalize_rotations(self) -> None:
        if self.count:
            self.rotations[:] = quat_normalize(self.rotations)

    def clamp_scales(self, scale_min: float, scale_max: float) -> None:
        np.clip(self.log_scales, np.log(scale_min), np.log(scale_max), out=self.log_scales)

    def check_invariants(self, scale_min=None, scale_max=None, tol=1e-6) -> None:
        """Raise ``ValueError`` if any stored invariant is violated."""
        if self.count == 0:
            return
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.max(np.abs(norms - 1.0)) > tol:
            raise ValueError("rotation quaternions are not unit norm")
        s = self.scales
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise ValueError("scales must be positive and finite")
        if scale_min is not None and s.min() < scale_min * (1 - 1e-12):
            raise ValueError("scale below scale_min")
        if scale_max is not None and s.max() > scale_max * (1 + 1e-12):
            raise ValueError("scale above scale_max")
        if not (np.all(np.isfinite(self.centers)) and np.all(np.isfinite(self.intensities))):
            raise ValueError("non-finite centers or intensities")


@dataclass
class GaussianGrads:
    centers: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    intensities: np.ndarray

    @classmethod
    def zeros_like(cls, gset: GaussianSet) -> "GaussianGrads":
        return cls(np.zeros_like(gset.centers), np.zeros_like(gset.rotations),
                   np.zeros_like(gset.log_scales), np.zeros_like(gset.intensities))

    def __iadd__(self, other: "GaussianGrads"):
        self.centers += other.centers
        self.rotations += other.rotations
        self.log_scales += other.log_scales
        self.intensities += other.intensities
        return self

    def scaled(self, s: float) -> "GaussianGrads":
        return GaussianGrads(self.centers * s, self.rotations * s,
                             self.log_scales * s, self.intensities * s)

    def zero_(self) -> None:
        for a in (self.centers, self.rotations, self.log_scales, self.intensities):
            a.fill(0.0)

    def groups(self) -> dict:
        return {"mean": self.centers, "rotation": self.rotations,
                "scale": self.log_scales, "intensity": self.intensities}


@dataclass
class SpatialIndex:
    """Uniform grid; cell ``c`` lists (ascending) every primitive whose
    support ball intersects it.  Border cells extend to infinity outward."""

    lo: np.ndarray
    cell_size: float
    dims: np.ndarray
    cell_start: np.ndarray
    cell_items: np.ndarray
    radii: np.ndarray
    centers: np.ndarray
    pad: float = 0.0

    def cell_of(self, x) -> int:
        f = np.floor((np.asarray(x, dtype=np.float64) - self.lo) / self.cell_size)
        i = np.clip(f, 0, self.dims - 1).astype(np.int64)
        return int((i[0] * self.dims[1] + i[1]) * self.dims[2] + i[2])

    def query(self, x) -> np.ndarray:
        c = self.cell_of(x)
        return self.cell_items[self.cell_start[c]:self.cell_start[c + 1]]

    def is_stale(self, gset: GaussianSet) -> bool:
        """True once some support ball may have left its registered cells.

        Balls are registered with radius ``r_j + pad``; the index stays valid
        while every ``|Δμ_j| + max(0, Δr_j) <= pad``.  With ``pad`` at half a
        cell this is the "moved more than half a cell" rebuild rule.
        """
        if gset.count != len(self.radii):
            return True
        if gset.count == 0:
            return False
        moved = np.linalg.norm(gset.centers - self.centers, axis=1)
        grown = np.maximum(gset.support_radii() - self.radii, 0.0)
        return bool(np.max(moved + grown) > self.pad)


def pack_primitives(gset: GaussianSet) -> np.ndarray:
    J = gset.count
    prim = np.zeros((J, PSTRIDE))
    if J == 0:
        return prim
    prim[:, 0:3] = gset.centers
    prim[:, 3:12] = gset.rotation_matrices().reshape(J, 9)
    s = gset.scales
    prim[:, 12:15] = 1.0 / s
    prim[:, 15] = gset.intensities
    prim[:, 16] = (CUTOFF * s.max(axis=1)) ** 2
    return prim


def eval_primitive(center, rotation, log_scale, intensity, x) -> float:
    """Single truncated primitive; Σ⁻¹ built as R S⁻² Rᵀ."""
    center = np.asarray(center, dtype=np.float64)
    d = np.asarray(x, dtype=np.float64) - center
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    if np.linalg.norm(d) > CUTOFF * s.max():
        return 0.0
    R = quat_to_matrix(rotation)
    inv_cov = R @ np.diag(1.0 / s ** 2) @ R.T
    return float(intensity * np.exp(-0.5 * d @ inv_cov @ d))


def default_cell_size(gset: GaussianSet) -> float:
    return float(np.median(gset.support_radii())) if gset.count else 1.0


def build_index(gset: GaussianSet, bounds, cell_size=None, pad: float = 0.0,
                max_cells=16_000_000) -> SpatialIndex:
    """Grid over ``bounds = (lo, hi)``; ``cell_size`` defaults to median(3σ).

    ``pad`` enlarges the registered balls so the index survives small
    parameter updates (see :meth:`SpatialIndex.is_stale`).
    """
    lo, hi = (np.asarray(b, dtype=np.float64).reshape(3) for b in bounds)
    if cell_size is None:
        cell_size = default_cell_size(gset)
    cell_size = float(cell_size)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("index bounds must be finite")
    if not np.isfinite(cell_size) or cell_size <= 0:
        raise ValueError("cell_size must be positive and finite")
    dims = np.maximum(1, np.ceil((hi - lo) / cell_size)).astype(np.int64)
    if np.prod(dims) > max_cells:
        raise ValueError(f"index would need {int(np.prod(dims))} cells; increase cell_size")
    if pad < 0 or not np.isfinite(pad):
        raise ValueError("pad must be a non-negative finite number")
    radii = gset.support_radii()
    start, items = kernels.build_cells(gset.centers, np.ascontiguousarray(radii + pad), lo,
                                       cell_size, dims)
    return SpatialIndex(lo, cell_size, dims, np.asarray(start), np.asarray(items),
                        radii.copy(), gset.centers.copy(), float(pad))


def _points(points) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))


def eval_volume(gset: GaussianSet, index: SpatialIndex, points, threads: int = 1,
                prim=None) -> np.ndarray:
    pts = _points(points)
    out = np.zeros(len(pts))
    if gset.count == 0 or len(pts) == 0:
        return out
    if prim is None:
        prim = pack_primitives(gset)
    kernels.field_forward(prim, index.cell_start, index.cell_items, index.lo,
                          index.cell_size, index.dims, pts, out, int(threads))
    return out


def quaternion_grad(rotations, dR) -> np.ndarray:
    """Chain ∂L/∂R through R(q/|q|); the result is tangent to the unit sphere."""
    qn = np.linalg.norm(rotations, axis=1, keepdims=True)
    q = rotations / qn
    w, x, y, z = q.T
    G = dR.reshape(-1, 3, 3)
    g = np.empty_like(q)
    g[:, 0] = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0]
                   - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    g[:, 1] = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1]
                   - w * G[:, 1, 2] + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    g[:, 2] = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0]
                   + z * G[:, 1, 2] - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    g[:, 3] = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0]
                   - 2 * z * G[:, 1, 1] + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    g -= q * np.sum(q * g, axis=1, keepdims=True)
    return g / qn


def raw_to_grads(gset: GaussianSet, acc: np.ndarray) -> GaussianGrads:
    return GaussianGrads(
        centers=acc[:, 1:4].copy(),
        rotations=quaternion_grad(gset.rotations, acc[:, 7:16]),
        log_scales=acc[:, 4:7].copy(),
        intensities=acc[:, 0].copy(),
    )


def eval_volume_backward(gset: GaussianSet, index: SpatialIndex, points, upstream,
                         spatial: bool = False, threads: int = 1, prim=None):
    """Gradients of ``sum_k upstream[k] * V(points[k])`` w.r.t. all parameters.

    With ``spatial=True`` also returns ∂V/∂x at every point (unweighted).
    """
    pts = _points(points)
    up = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).reshape(-1))
    if len(up) != len(pts):
        raise ValueError("upstream gradients must align with points")
    nchunks = max(1, int(threads))
    acc = np.zeros((nchunks, gset.count, GSTRIDE))
    sgrad = np.zeros((len(pts), 3)) if spatial else np.zeros((1, 3))
    if gset.count and len(pts):
        if prim is None:
            prim = pack_primitives(gset)
        kernels.field_backward(prim, index.cell_start, index.cell_items, index.lo,
                               index.cell_size, index.dims, pts, up, acc, sgrad, bool(spatial))
    total = acc[0]
    for c in range(1, nchunks):
        total = total + acc[c]
    grads = raw_to_grads(gset, total)
    if spatial:
        return grads, sgrad
    return grads


def rasterize_to_grid(gset: GaussianSet, index: SpatialIndex, grid: GridSpec,
                      threads: int = 1) -> VoxelVolume:
    if not isinstance(grid, GridSpec):
        grid = GridSpec(*grid)
    vals = eval_volume(gset, index, grid.points(), threads=threads)
    return VoxelVolume(vals.reshape(grid.dims), grid)


def field_index(gset: GaussianSet, points, cell_fraction: float = 1.0, pad: float = 0.0) -> SpatialIndex:
    """Index whose bounds cover ``points`` and all centres."""
    pts = _points(points)
    parts = [pts] + ([gset.centers] if gset.count else [])
    allp = np.vstack(parts) if len(pts) or gset.count else np.zeros((1, 3))
    lo = allp.min(axis=0) - pad
    hi = allp.max(axis=0) + pad
    h = default_cell_size(gset) * cell_fraction
    span = float(np.max(hi - lo))
    # keep the grid bounded for degenerate tiny primitives
    h = max(h, span / 256.0, 1e-6)
    return build_index(gset, (lo, hi), h)
