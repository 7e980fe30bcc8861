"""Image-quality and motion-recovery metrics.

Volume metrics accept arrays or :class:`VoxelVolume`; an optional boolean
``mask`` restricts the average.  Evaluation against phantoms uses the
support mask (reference > 0, dilated by two voxels) after a rigid
registration of the reconstruction onto the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.ndimage import binary_dilation, gaussian_filter

from .rigid import (RigidTransform, axis_angle_to_quat, geodesic_errors, quat_multiply,
                    quat_to_axis_angle, slice_pose)
from .volume import VoxelVolume

PSNR_CAP = 99.0


def _arr(v) -> np.ndarray:
    return np.asarray(v.data if isinstance(v, VoxelVolume) else v, dtype=np.float64)


def _pair(ref, test):
    a, b = _arr(ref), _arr(test)
    if a.shape != b.shape:
        raise ValueError(f"volume dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def mse(ref, test, mask=None) -> float:
    a, b = _pair(ref, test)
    d = (a - b) ** 2
    return float(d[mask].mean() if mask is not None else d.mean())


def psnr(ref, test, peak: float | None = None, mask=None) -> float:
    """10 log10(peak^2 / MSE); ``peak`` defaults to max(ref).  Capped at 99 dB."""
    a, _ = _pair(ref, test)
    if peak is None:
        peak = float(a.max())
    if not peak > 0:
        raise ValueError("peak must be positive")
    m = mse(ref, test, mask)
    if m == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / m), PSNR_CAP))


def nrmse(ref, test, mask=None) -> float:
    """RMSE divided by the reference range (max - min)."""
    a, _ = _pair(ref, test)
    rng = float(a.max() - a.min())
    if rng == 0:
        raise ValueError("reference volume has zero intensity range")
    return float(np.sqrt(mse(ref, test, mask)) / rng)


def ssim_map3d(ref, test, window: int = 11, sigma: float = 1.5, L: float = 1.0):
    """Local SSIM map with a Gaussian window (reflect padding)."""
    a, b = _pair(ref, test)
    radius = (window - 1) // 2
    trunc = radius / sigma

    def f(x):
        return gaussian_filter(x, sigma, mode="reflect", truncate=trunc)

    C1, C2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    ma, mb = f(a), f(b)
    va = f(a * a) - ma * ma
    vb = f(b * b) - mb * mb
    cov = f(a * b) - ma * mb
    return ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2))


def ssim3d(ref, test, window: int = 11, sigma: float = 1.5, L: float = 1.0, mask=None) -> float:
    """Mean local SSIM, ignoring a border of ``window // 2`` voxels."""
    S = ssim_map3d(ref, test, window, sigma, L)
    r = (window - 1) // 2
    core = tuple(slice(r, n - r) if n > 2 * r else slice(None) for n in S.shape)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)[core]
        return float(S[core][m].mean())
    return float(S[core].mean())


def support_mask(ref, threshold: float = 0.0, dilation: int = 2) -> np.ndarray:
    m = _arr(ref) > threshold
    if dilation > 0:
        m = binary_dilation(m, iterations=dilation)
    return m


# -- rigid registration of the reconstruction ----------------------------------

def _resample(moving: VoxelVolume, grid, params) -> np.ndarray:
    """``moving`` sampled at T(x) for the reference voxel centres x."""
    T = RigidTransform(axis_angle_to_quat(params[:3]), params[3:])
    return moving.sample(T.apply(grid.points())).reshape(grid.dims)


def register_rigid(ref: VoxelVolume, moving: VoxelVolume, mask=None, max_angle_deg: float = 6.0,
                   grid_steps: int = 3):
    """Rigid T minimising mean (ref(x) - moving(T x))^2 over ``mask``.

    An exhaustive grid over small rotations seeds a Powell refinement.
    Returns (transform, resampled moving volume as an array).
    """
    a = _arr(ref)
    m = support_mask(ref) if mask is None else np.asarray(mask, dtype=bool)
    pts = ref.grid.points()[m.ravel()]
    target = a[m]

    def cost(p):
        T = RigidTransform(axis_angle_to_quat(p[:3]), p[3:])
        return float(np.mean((moving.sample(T.apply(pts)) - target) ** 2))

    angles = np.radians(np.linspace(-max_angle_deg, max_angle_deg, grid_steps))
    best = np.zeros(6)
    best_c = cost(best)
    for wx in angles:
        for wy in angles:
            for wz in angles:
                p = np.array([wx, wy, wz, 0, 0, 0])
                c = cost(p)
                if c < best_c:
                    best, best_c = p, c
    res = optimize.minimize(cost, best, method="Powell",
                            options={"xtol": 1e-4, "ftol": 1e-10, "maxfev": 4000})
    p = res.x if res.fun <= best_c else best
    T = RigidTransform(axis_angle_to_quat(p[:3]), p[3:])
    return T, _resample(moving, ref.grid, p)


@dataclass
class VolumeReport:
    psnr: float
    ssim: float
    nrmse: float
    psnr_registered: float
    ssim_registered: float
    nrmse_registered: float
    registration: RigidTransform

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "nrmse": self.nrmse,
                "psnr_registered": self.psnr_registered, "ssim_registered": self.ssim_registered,
                "nrmse_registered": self.nrmse_registered,
                "registration": {"rotation": self.registration.rotation.tolist(),
                                 "translation": self.registration.translation.tolist()}}


def volume_report(ref: VoxelVolume, test: VoxelVolume, register: bool = True, mask=None) -> VolumeReport:
    """Raw and registered PSNR / SSIM / NRMSE inside the support mask."""
    m = support_mask(ref) if mask is None else mask
    raw = (psnr(ref, test, mask=m), ssim3d(ref, test, mask=m), nrmse(ref, test, mask=m))
    if register:
        T, moved = register_rigid(ref, test, m)
        reg = (psnr(ref, moved, mask=m), ssim3d(ref, moved, mask=m), nrmse(ref, moved, mask=m))
    else:
        T, reg = RigidTransform.identity(), raw
    return VolumeReport(*raw, *reg, T)


# -- motion --------------------------------------------------------------------

def _geometric_median(x, iters: int = 100, tol: float = 1e-12) -> np.ndarray:
    """Weiszfeld iteration; equivariant under rotations of the inputs."""
    y = x.mean(axis=0)
    for _ in range(iters):
        d = np.linalg.norm(x - y, axis=1)
        if np.any(d < tol):
            return x[np.argmin(d)].copy()
        w = 1.0 / d
        ny = (x * w[:, None]).sum(axis=0) / w.sum()
        if np.linalg.norm(ny - y) < tol:
            return ny
        y = ny
    return y


def _quat_mean(q) -> np.ndarray:
    M = q.T @ q
    w, v = np.linalg.eigh(M)
    m = v[:, -1]
    return m if m[0] >= 0 else -m


def gauge_transform(truth, estimate) -> RigidTransform:
    """Median ``G`` with ``estimate_i ≈ G ∘ truth_i`` (poses in world space)."""
    rel = [e.compose(t.inverse()) for t, e in zip(truth, estimate)]
    q = np.array([r.rotation for r in rel])
    qm = _quat_mean(q)
    inv_m = np.array([qm[0], -qm[1], -qm[2], -qm[3]])
    logs = np.array([quat_to_axis_angle(quat_multiply(r.rotation, inv_m)) for r in rel])
    qg = quat_multiply(axis_angle_to_quat(_geometric_median(logs)), qm)
    Rg = RigidTransform(qg).matrix
    tr = np.array([e.translation - Rg @ t.translation for t, e in zip(truth, estimate)])
    return RigidTransform(qg, _geometric_median(tr))


def _flatten(x):
    if x and isinstance(x[0], (list, tuple)):
        return [t for row in x for t in row]
    return list(x)


@dataclass
class MotionReport:
    rotation_deg: np.ndarray
    translation_mm: np.ndarray
    gauge: RigidTransform

    def summary(self) -> dict:
        r, t = self.rotation_deg, self.translation_mm
        return {"rotation_deg": {"median": float(np.median(r)), "mean": float(np.mean(r)),
                                 "max": float(np.max(r))},
                "translation_mm": {"median": float(np.median(t)), "mean": float(np.mean(t)),
                                   "max": float(np.max(t))},
                "n_slices": int(len(r))}


def motion_report(truth, estimate, geometries=None, align: bool = True) -> MotionReport:
    """Per-slice rotation (deg) and translation (mm) errors.

    Without ``geometries`` the transforms are compared as world poses.  With
    a matching list of :class:`SliceGeometry`, they are per-slice motions and
    are first turned into world poses of the slices.  ``align`` removes the
    global-pose gauge first.
    """
    truth, estimate = _flatten(truth), _flatten(estimate)
    if len(truth) != len(estimate) or not truth:
        raise ValueError("truth and estimate must list the same, non-zero number of transforms")
    if geometries is not None:
        geometries = _flatten(geometries)
        truth = [slice_pose(g, t) for g, t in zip(geometries, truth)]
        estimate = [slice_pose(g, t) for g, t in zip(geometries, estimate)]
    G = gauge_transform(truth, estimate) if align else RigidTransform.identity()
    Gi = G.inverse()
    errs = np.array([geodesic_errors(t, Gi.compose(e)) for t, e in zip(truth, estimate)])
    return MotionReport(errs[:, 0], errs[:, 1], G)


def evaluate_reconstruction(gaussians, transforms, truth_volume: VoxelVolume, truth_transforms=None,
                            geometries=None, register: bool = True, threads: int = 1) -> dict:
    """Volume metrics (raw and registered) plus motion errors when truth is known."""
    from .gaussians import field_index, rasterize_to_grid

    grid = truth_volume.grid
    rec = rasterize_to_grid(gaussians, field_index(gaussians, grid.points()), grid, threads)
    out = {"volume": volume_report(truth_volume, rec, register).as_dict()}
    if truth_transforms is not None:
        init = [[RigidTransform.identity()] * len(row) for row in truth_transforms]
        out["motion_initial"] = motion_report(truth_transforms, init, geometries).summary()
        out["motion"] = motion_report(truth_transforms, transforms, geometries).summary()
    return out
