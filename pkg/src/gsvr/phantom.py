"""Synthetic phantoms, motion trajectories and benchmark cases.

Everything here is a pure function of its arguments and seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .acquisition import SliceStack, build_psf, make_stack_geometry, simulate_stack
from .gaussians import GaussianSet, field_index, rasterize_to_grid
from .rigid import RigidTransform, axis_angle_to_quat, quat_multiply, quat_to_axis_angle, quat_normalize
from .volume import GridSpec, VoxelVolume

KINDS = ("gaussian-mixture", "nested-ellipsoids", "checker-smooth")

# (max rotation in degrees per axis, max translation in mm per axis)
AMPLITUDES = {
    "none": (0.0, 0.0),
    "mild": (2.0, 1.0),
    "moderate": (5.0, 3.0),
    "severe": (10.0, 6.0),
}


@dataclass
class Phantom:
    kind: str
    params: dict
    volume: VoxelVolume
    gaussians: GaussianSet | None = None
    seed: int = 0


def _random_rotations(rng, n):
    return quat_normalize(rng.normal(size=(n, 4)))


def _gaussian_mixture(grid: GridSpec, params: dict, rng):
    n = int(params.get("count", 60))
    extent = np.asarray(grid.spacing) * (np.asarray(grid.dims) - 1)
    radius = float(params.get("radius_fraction", 0.3)) * extent.min()
    smin, smax = params.get("scale_range_mm", (2.5, 7.0))
    # centres uniform in a ball around the grid centre
    lo, hi = grid.bounds()
    c0 = 0.5 * (lo + hi)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    centers = c0 + d * radius * rng.uniform(0, 1, (n, 1)) ** (1 / 3)
    log_s = np.log(rng.uniform(smin, smax, (n, 3)))
    inten = rng.uniform(0.3, 1.0, n)
    gset = GaussianSet(centers, _random_rotations(rng, n), log_s, inten)
    vol = rasterize_to_grid(gset, field_index(gset, grid.points()), grid)
    peak = float(vol.data.max())
    gset.intensities /= peak
    vol = rasterize_to_grid(gset, field_index(gset, grid.points()), grid)
    return vol.data, gset


def _default_ellipsoids(rng):
    # (centre as fraction of half-extent, semi-axes fraction, rotation vector, value)
    shapes = [((0, 0, 0), (0.80, 0.70, 0.75), (0, 0, 0), 0.35),
              ((0, 0, 0), (0.70, 0.60, 0.65), (0, 0, 0), 0.60)]
    for _ in range(6):
        c = rng.uniform(-0.35, 0.35, 3)
        a = rng.uniform(0.08, 0.25, 3)
        shapes.append((tuple(c), tuple(a), tuple(rng.uniform(-0.5, 0.5, 3)), float(rng.uniform(0.2, 1.0))))
    return shapes


def _ellipsoids(grid: GridSpec, params: dict, rng):
    shapes = params.get("ellipsoids") or _default_ellipsoids(rng)
    lo, hi = grid.bounds()
    c0 = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    pts = grid.points()
    data = np.zeros(grid.size)
    for center, axes, rotvec, value in shapes:
        R = RigidTransform(axis_angle_to_quat(np.asarray(rotvec, dtype=np.float64))).matrix
        local = (pts - (c0 + np.asarray(center) * half)) @ R
        r2 = np.sum((local / (np.asarray(axes) * half)) ** 2, axis=1)
        data[r2 <= 1.0] = value
    data = data.reshape(grid.dims)
    sigma = float(params.get("smooth_voxels", 1.0))
    if sigma > 0:
        data = gaussian_filter(data, sigma, mode="constant")
    return data


def _checker(grid: GridSpec, params: dict, rng):
    block = float(params.get("block_mm", 12.0))
    lo, hi = grid.bounds()
    c0 = 0.5 * (lo + hi)
    pts = grid.points() - c0
    shift = rng.uniform(0, block, 3)
    parity = np.floor((pts + shift) / block).astype(int).sum(axis=1) % 2
    data = np.where(parity == 0, 0.4, 0.9)
    r = float(params.get("radius_fraction", 0.4)) * float(np.min(hi - lo))
    data = np.where(np.linalg.norm(pts, axis=1) <= r, data, 0.0).reshape(grid.dims)
    sigma = float(params.get("smooth_voxels", 1.5))
    if sigma > 0:
        data = gaussian_filter(data, sigma, mode="constant")
    return data


def make_phantom(kind: str = "gaussian-mixture", params=None, spacing=1.6, dims=(64, 64, 64),
                 seed: int = 0) -> Phantom:
    """Synthetic volume on a grid centred at the origin, intensities in [0, 1].

    ``gaussian-mixture`` also returns the exact :class:`GaussianSet` whose
    rasterisation is the stored volume.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown phantom kind {kind!r}; expected one of {KINDS}")
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    grid = GridSpec.centered(dims, spacing)
    gset = None
    if kind == "gaussian-mixture":
        data, gset = _gaussian_mixture(grid, params, rng)
    elif kind == "nested-ellipsoids":
        data = _ellipsoids(grid, params, rng)
    else:
        data = _checker(grid, params, rng)
    data = np.clip(data, 0.0, 1.0)
    return Phantom(kind, params, VoxelVolume(data, grid, {"kind": kind, "seed": seed}), gset, seed)


# -- motion ------------------------------------------------------------------

@dataclass
class MotionTrajectory:
    transforms: list
    max_rotation_deg: float
    max_translation_mm: float
    model: str
    seed: int


def _within(rotvec, max_rot):
    return bool(np.all(np.abs(rotvec) <= max_rot + 1e-12))


def make_trajectory(n_slices: int, amplitude=(5.0, 3.0), model: str = "random-walk", seed: int = 0,
                    step=None) -> MotionTrajectory:
    """Per-slice rigid motion with per-axis bounds.

    ``amplitude`` is (max rotation deg, max translation mm) applied to every
    component of the rotation vector and translation; it may also name a
    preset in :data:`AMPLITUDES`.  The random walk moves by a rotation of at
    most ``step[0]`` degrees (geodesic) and ``step[1]`` mm per axis between
    consecutive slices; steps that would leave the bounds are reflected, or
    dropped if the reflection leaves them too.
    """
    if isinstance(amplitude, str):
        amplitude = AMPLITUDES[amplitude]
    max_rot = np.radians(float(amplitude[0]))
    max_tr = float(amplitude[1])
    if max_rot < 0 or max_tr < 0:
        raise ValueError("amplitudes must be non-negative")
    rng = np.random.default_rng(seed)
    out = []
    if model == "independent":
        for _ in range(n_slices):
            w = rng.uniform(-max_rot, max_rot, 3)
            t = rng.uniform(-max_tr, max_tr, 3)
            out.append(RigidTransform(axis_angle_to_quat(w), t))
    elif model == "random-walk":
        if step is None:
            step = (amplitude[0] / 3.0, amplitude[1] / 3.0)
        srot = np.radians(float(step[0]))
        str_ = float(step[1])
        q = axis_angle_to_quat(rng.uniform(-max_rot, max_rot, 3))
        t = rng.uniform(-max_tr, max_tr, 3)
        out.append(RigidTransform(q, t))
        for _ in range(n_slices - 1):
            d = rng.normal(size=3)
            n = np.linalg.norm(d)
            d = d / n * srot * rng.uniform(0, 1) if n > 0 else np.zeros(3)
            for cand in (d, -d, np.zeros(3)):
                qn = quat_multiply(axis_angle_to_quat(cand), q)
                if _within(quat_to_axis_angle(qn), max_rot):
                    q = qn
                    break
            dt = rng.uniform(-str_, str_, 3)
            t = np.where(np.abs(t + dt) <= max_tr, t + dt, t - dt)
            t = np.clip(t, -max_tr, max_tr)
            out.append(RigidTransform(q, t))
    else:
        raise ValueError(f"unknown trajectory model {model!r}")
    return MotionTrajectory(out, float(amplitude[0]), max_tr, model, seed)


# -- benchmark cases -----------------------------------------------------------

@dataclass
class Protocol:
    in_plane_spacing: float = 2.0
    rows: int = 48
    cols: int = 48
    thickness: float = 4.0
    n_slices: int = 20
    gap: float = 0.0
    orientations: tuple = ("axial", "coronal", "sagittal")
    psf_samples: tuple = (1, 1, 5)
    noise_sigma: float = 0.0
    motion: str = "moderate"
    motion_model: str = "random-walk"
    phantom_kind: str = "gaussian-mixture"
    phantom_spacing: float = 1.6
    phantom_dims: tuple = (64, 64, 64)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


PROTOCOLS = {
    "desk": Protocol(psf_samples=(1, 1, 3)),
    "full": Protocol(in_plane_spacing=1.0, rows=128, cols=128, thickness=3.0, n_slices=30,
                     phantom_spacing=1.0, phantom_dims=(128, 128, 128)),
}


def protocol_from(name_or_protocol, **changes) -> Protocol:
    base = PROTOCOLS[name_or_protocol] if isinstance(name_or_protocol, str) else name_or_protocol
    d = asdict(base)
    unknown = set(changes) - set(d)
    if unknown:
        raise ValueError(f"unknown protocol fields: {sorted(unknown)}")
    d.update(changes)
    return Protocol(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class GroundTruth:
    volume: VoxelVolume
    transforms: list
    gaussians: GaussianSet | None
    protocol: Protocol
    seeds: dict = field(default_factory=dict)


def make_benchmark_case(phantom: Phantom | None = None, protocol="desk", seed: int = 0):
    """Three orthogonal stacks acquired from ``phantom`` under per-slice motion.

    Seeds for the trajectory and noise are derived from ``seed``.  Stacks are
    simulated from the exact Gaussian set when the phantom has one, so the
    acquisition is consistent with the reconstruction model.
    """
    proto = protocol_from(protocol) if isinstance(protocol, str) else protocol
    ss = np.random.SeedSequence(seed)
    s_phantom, s_motion, s_noise = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    if phantom is None:
        phantom = make_phantom(proto.phantom_kind, None, proto.phantom_spacing, proto.phantom_dims,
                               s_phantom)
    source = phantom.gaussians if phantom.gaussians is not None else phantom.volume
    n_total = proto.n_slices * len(proto.orientations)
    traj = make_trajectory(n_total, proto.motion, proto.motion_model, s_motion)
    gap = proto.gap or proto.thickness
    stacks, truth = [], []
    for i, ori in enumerate(proto.orientations):
        geo = make_stack_geometry(ori, (0.0, 0.0, 0.0), proto.in_plane_spacing, proto.rows,
                                  proto.cols, proto.thickness, proto.n_slices, gap, name=ori)
        psf = build_psf(geo.geometry(0), proto.psf_samples)
        ts = traj.transforms[i * proto.n_slices:(i + 1) * proto.n_slices]
        st = simulate_stack(source, geo, ts, psf, proto.noise_sigma, s_noise + i, name=ori)
        stacks.append(st)
        truth.append(ts)
    seeds = {"case": seed, "phantom": phantom.seed, "motion": s_motion, "noise": s_noise}
    meta = {"protocol": proto.to_dict(), "seeds": seeds}
    return SliceStack(stacks, meta), GroundTruth(phantom.volume, truth, phantom.gaussians, proto, seeds)
