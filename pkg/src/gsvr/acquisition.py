"""Forward slice acquisition ``y_i = D B T_i x`` over a continuous field.

``T_i`` maps slice sample points into the volume frame, ``B`` is a Gaussian
PSF discretised as a fixed tensor-product quadrature in slice-local
coordinates, and ``D`` is implicit: the model is evaluated only at each
acquired pixel's location.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .gaussians import GaussianSet, SpatialIndex, eval_volume, eval_volume_backward
from .rigid import RigidTransform, SliceGeometry, quat_to_matrix, slice_pose
from .volume import VoxelVolume

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))

ORIENTATIONS = {
    # columns: slice u axis, v axis, normal (proper rotations)
    "axial": np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
    "coronal": np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
    "sagittal": np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
}


@dataclass
class PsfModel:
    sigma: np.ndarray
    sample_offsets: np.ndarray
    sample_weights: np.ndarray

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.sample_offsets = np.asarray(self.sample_offsets, dtype=np.float64).reshape(-1, 3)
        self.sample_weights = np.asarray(self.sample_weights, dtype=np.float64).reshape(-1)

    @property
    def n_samples(self) -> int:
        return len(self.sample_weights)


def fwhm_to_sigma(fwhm: float) -> float:
    return float(fwhm) * FWHM_TO_SIGMA


def build_psf(geom: SliceGeometry, samples_per_axis=(1, 1, 5), inplane_fwhm_factor=1.2,
              through_plane_fwhm_factor=1.0) -> PsfModel:
    """Tensor-product Gaussian quadrature spanning ±2σ per axis.

    Axis order is slice-local (u: columns, v: rows, normal).
    """
    samples = tuple(int(n) for n in samples_per_axis)
    if len(samples) != 3 or any(n < 1 or n % 2 == 0 for n in samples):
        raise ValueError("samples_per_axis must be three odd integers >= 1")
    row_sp, col_sp = geom.in_plane_spacing
    fwhm = np.array([inplane_fwhm_factor * col_sp, inplane_fwhm_factor * row_sp,
                     through_plane_fwhm_factor * geom.slice_thickness])
    if not np.all(fwhm > 0) or not np.all(np.isfinite(fwhm)):
        raise ValueError("PSF widths must be positive")
    sigma = fwhm * FWHM_TO_SIGMA
    axes = [np.linspace(-2.0 * s, 2.0 * s, n) if n > 1 else np.zeros(1)
            for s, n in zip(sigma, samples)]
    grid = np.meshgrid(*axes, indexing="ij")
    offsets = np.stack([g.ravel() for g in grid], axis=1)
    w = np.exp(-0.5 * np.sum((offsets / sigma) ** 2, axis=1))
    return PsfModel(sigma, offsets, w / w.sum())


@dataclass
class Stack:
    """Parallel slices sharing one lattice; slice k sits at
    ``center + R_orient @ (0, 0, (k - (n-1)/2) * gap)``."""

    orientation: np.ndarray
    center: np.ndarray
    in_plane_spacing: tuple
    rows: int
    cols: int
    slice_thickness: float
    slice_gap: float
    slices: np.ndarray
    transforms: list = field(default_factory=list)
    truth: list | None = None
    name: str = ""

    def __post_init__(self):
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        self.center = np.asarray(self.center, dtype=np.float64)
        self.in_plane_spacing = tuple(float(s) for s in self.in_plane_spacing)
        self.slices = np.asarray(self.slices, dtype=np.float64)
        if self.slices.ndim != 3 or self.slices.shape[1:] != (self.rows, self.cols):
            raise ValueError(f"slice array shape {self.slices.shape} does not match "
                             f"rows x cols = {self.rows} x {self.cols}")
        if self.slices.shape[0] < 1:
            raise ValueError("a stack needs at least one slice")
        if not self.transforms:
            self.transforms = [RigidTransform.identity() for _ in range(self.n_slices)]
        if len(self.transforms) != self.n_slices:
            raise ValueError("one transform per slice is required")
        if self.truth is not None and len(self.truth) != self.n_slices:
            raise ValueError("one ground-truth transform per slice is required")

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]

    @property
    def normal(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)[:, 2]

    def slice_center(self, k: int) -> np.ndarray:
        offset = (k - (self.n_slices - 1) / 2.0) * self.slice_gap
        return self.center + quat_to_matrix(self.orientation) @ np.array([0.0, 0.0, offset])

    def geometry(self, k: int) -> SliceGeometry:
        return SliceGeometry(self.in_plane_spacing, self.rows, self.cols, self.slice_thickness,
                             self.slice_gap, RigidTransform(self.orientation, self.slice_center(k)))

    def poses(self, transforms=None):
        ts = self.transforms if transforms is None else transforms
        return [slice_pose(self.geometry(k), t) for k, t in enumerate(ts)]

    def copy(self, **changes) -> "Stack":
        base = dict(slices=self.slices.copy(), transforms=list(self.transforms),
                    truth=None if self.truth is None else list(self.truth))
        base.update(changes)
        return replace(self, **base)

    def downsample(self, factor: int) -> "Stack":
        """Average ``factor x factor`` pixel blocks (trailing pixels dropped).

        The coarse lattice keeps the stack centre: block centres of a centred
        lattice stay centred when ``rows`` and ``cols`` are multiples of
        ``factor``.
        """
        if factor == 1:
            return self.copy()
        r, c = self.rows // factor, self.cols // factor
        if r < 1 or c < 1:
            raise ValueError("downsampling factor larger than the slice")
        offr = (self.rows - r * factor) // 2
        offc = (self.cols - c * factor) // 2
        s = self.slices[:, offr:offr + r * factor, offc:offc + c * factor]
        s = s.reshape(self.n_slices, r, factor, c, factor).mean(axis=(2, 4))
        sp = (self.in_plane_spacing[0] * factor, self.in_plane_spacing[1] * factor)
        return self.copy(slices=s, rows=r, cols=c, in_plane_spacing=sp)


@dataclass
class SliceStack:
    stacks: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.stacks:
            raise ValueError("at least one stack is required")

    @property
    def n_slices(self) -> int:
        return sum(s.n_slices for s in self.stacks)

    def slice_refs(self):
        """(stack index, slice index) for every slice, stack-major."""
        return [(i, k) for i, s in enumerate(self.stacks) for k in range(s.n_slices)]

    def transforms(self):
        return [list(s.transforms) for s in self.stacks]

    def truth_transforms(self):
        return [None if s.truth is None else list(s.truth) for s in self.stacks]

    def copy(self) -> "SliceStack":
        return SliceStack([s.copy() for s in self.stacks], dict(self.meta))

    def downsample(self, factor: int) -> "SliceStack":
        return SliceStack([s.downsample(factor) for s in self.stacks], dict(self.meta))

    def sample_positions(self, transforms=None):
        """World positions (N, 3) and values (N,) of every pixel centre."""
        pos, val = [], []
        for i, st in enumerate(self.stacks):
            ts = st.transforms if transforms is None else transforms[i]
            for k in range(st.n_slices):
                geom = st.geometry(k)
                pos.append(slice_pose(geom, ts[k]).apply(geom.pixel_grid()))
                val.append(st.slices[k].ravel())
        return np.vstack(pos), np.concatenate(val)


# -- forward / backward -----------------------------------------------------

@dataclass
class SlicePoints:
    """Flattened PSF sample points for a batch of slices."""

    points: np.ndarray        # (N, 3) world mm
    lever: np.ndarray         # (N, 3) point minus rotation centre
    weights: np.ndarray       # (N,) PSF weight of each sample
    pixel: np.ndarray         # (N,) flat pixel id across the batch
    shapes: list              # (rows, cols) per slice
    offsets: np.ndarray       # pixel offset of each slice in the flat pixel array


def slice_points(geom: SliceGeometry, t: RigidTransform, psf: PsfModel):
    """World sample points (P*K, 3) and lever arms about the slice centre."""
    local = geom.pixel_grid()[:, None, :] + psf.sample_offsets[None, :, :]
    local = local.reshape(-1, 3)
    pose = slice_pose(geom, t)
    lever = local @ pose.matrix.T
    return lever + pose.translation, lever


def gather_points(items) -> SlicePoints:
    """``items``: iterable of (geom, transform, psf)."""
    pts, lev, wts, pix, shapes, offs = [], [], [], [], [], [0]
    for geom, t, psf in items:
        p, lv = slice_points(geom, t, psf)
        npx = geom.rows * geom.cols
        pts.append(p)
        lev.append(lv)
        wts.append(np.tile(psf.sample_weights, npx))
        pix.append(offs[-1] + np.repeat(np.arange(npx), psf.n_samples))
        shapes.append((geom.rows, geom.cols))
        offs.append(offs[-1] + npx)
    return SlicePoints(np.ascontiguousarray(np.vstack(pts)), np.vstack(lev), np.concatenate(wts),
                       np.concatenate(pix), shapes, np.asarray(offs))


def render_points(values, sp: SlicePoints):
    flat = np.bincount(sp.pixel, weights=sp.weights * values, minlength=sp.offsets[-1])
    return [flat[sp.offsets[i]:sp.offsets[i + 1]].reshape(shape) for i, shape in enumerate(sp.shapes)]


def forward_points(gset: GaussianSet, index: SpatialIndex, sp: SlicePoints, threads=1, prim=None):
    return render_points(eval_volume(gset, index, sp.points, threads=threads, prim=prim), sp)


def backward_points(gset: GaussianSet, index: SpatialIndex, sp: SlicePoints, upstream_images,
                    motion=True, threads=1, prim=None):
    """Gaussian gradients and per-slice (6,) motion gradients."""
    flat = np.concatenate([np.asarray(u, dtype=np.float64).ravel() for u in upstream_images])
    if len(flat) != sp.offsets[-1]:
        raise ValueError("upstream images do not match the slice lattices")
    up = flat[sp.pixel] * sp.weights
    out = eval_volume_backward(gset, index, sp.points, up, spatial=motion, threads=threads, prim=prim)
    if not motion:
        return out, None
    grads, dvdx = out
    s = dvdx * up[:, None]
    rot = np.cross(sp.lever, s)
    nslice = len(sp.shapes)
    # slice id of every sample
    sid = np.searchsorted(sp.offsets, sp.pixel, side="right") - 1
    mg = np.zeros((nslice, 6))
    for k in range(3):
        mg[:, k] = np.bincount(sid, weights=rot[:, k], minlength=nslice)
        mg[:, 3 + k] = np.bincount(sid, weights=s[:, k], minlength=nslice)
    return grads, mg


def forward_slice(gset: GaussianSet, index: SpatialIndex, geom: SliceGeometry,
                  t: RigidTransform, psf: PsfModel, threads=1) -> np.ndarray:
    return forward_points(gset, index, gather_points([(geom, t, psf)]), threads=threads)[0]


def forward_slice_backward(gset: GaussianSet, index: SpatialIndex, geom: SliceGeometry,
                           t: RigidTransform, psf: PsfModel, upstream, threads=1):
    """(GaussianGrads, motion gradient ordered (axis_angle, translation))."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (geom.rows, geom.cols):
        raise ValueError("upstream gradient must match the slice dimensions")
    sp = gather_points([(geom, t, psf)])
    grads, mg = backward_points(gset, index, sp, [upstream], motion=True, threads=threads)
    return grads, mg[0]


def sample_source(source, points, index=None):
    """Evaluate a VoxelVolume (trilinear) or GaussianSet at world points."""
    if isinstance(source, VoxelVolume):
        return source.sample(points, order=1)
    if isinstance(source, GaussianSet):
        from .gaussians import field_index

        idx = index if index is not None else field_index(source, points)
        return eval_volume(source, idx, points)
    raise TypeError(f"cannot sample {type(source).__name__}")


def simulate_stack(source, stack: Stack, transforms, psf: PsfModel, noise_sigma: float = 0.0,
                   seed=None, name=None) -> Stack:
    """Acquire every slice of ``stack``'s geometry under ``transforms``.

    The returned stack holds the simulated pixels, nominal (identity) motion
    state, and ``transforms`` as ground truth.
    """
    transforms = list(transforms)
    if len(transforms) != stack.n_slices:
        raise ValueError(f"{len(transforms)} transforms for {stack.n_slices} slices")
    sp = gather_points([(stack.geometry(k), transforms[k], psf) for k in range(stack.n_slices)])
    vals = sample_source(source, sp.points)
    imgs = np.stack(render_points(vals, sp))
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        imgs = imgs + rng.normal(0.0, noise_sigma, imgs.shape)
    return stack.copy(slices=imgs, transforms=[RigidTransform.identity()] * stack.n_slices,
                      truth=transforms, name=name if name is not None else stack.name)


def make_stack_geometry(orientation: str, center, in_plane_spacing, rows, cols, thickness,
                        n_slices, gap=None, name=None) -> Stack:
    """Empty (zero) stack with a named orthogonal orientation."""
    from .rigid import matrix_to_quat

    R = ORIENTATIONS[orientation]
    sp = in_plane_spacing if np.ndim(in_plane_spacing) else (in_plane_spacing, in_plane_spacing)
    return Stack(matrix_to_quat(R), np.asarray(center, dtype=np.float64), tuple(sp), int(rows), int(cols),
                 float(thickness), float(thickness if gap is None else gap),
                 np.zeros((int(n_slices), int(rows), int(cols))), name=name or orientation)
