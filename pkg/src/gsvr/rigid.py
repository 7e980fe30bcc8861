"""Rigid slice motion: quaternion helpers, transforms, slice geometry.

Conventions
-----------
Quaternions are ``(w, x, y, z)``.  A slice's motion ``t`` acts about the
slice centre with world-aligned axes: the absolute pose of the slice is
``(R_t R_n, c_n + t_t)`` where ``(R_n, c_n)`` is the nominal pose.  Rotating
about the centre keeps rotation and translation gradients decoupled to first
order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


# -- quaternion helpers (vectorised over a leading axis) ---------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.array(q, dtype=np.float64)
    q[..., 1:] *= -1.0
    return q


def quat_to_matrix(q):
    """Rotation matrix of ``q / |q|``; accepts shape (4,) or (N, 4)."""
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(R):
    """Unit quaternion (w >= 0) of a rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    cands = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(cands))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def axis_angle_to_quat(v):
    """Exponential map from rotation vectors (radians) to unit quaternions."""
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x with a series for tiny angles
    small = theta < 1e-8
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(half), k * v], axis=-1)


def quat_to_axis_angle(q):
    q = quat_normalize(q)
    q = np.where(q[..., :1] < 0, -q, q)
    vn = np.linalg.norm(q[..., 1:], axis=-1, keepdims=True)
    theta = 2.0 * np.arctan2(vn, q[..., :1])
    scale = np.where(vn < 1e-12, 2.0, theta / np.where(vn < 1e-12, 1.0, vn))
    return scale * q[..., 1:]


def quat_angle(q):
    """Rotation angle in radians, in [0, pi]."""
    q = quat_normalize(q)
    return 2.0 * np.arctan2(np.linalg.norm(q[..., 1:], axis=-1), np.abs(q[..., 0]))


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# -- transforms -------------------------------------------------------------

@dataclass(frozen=True)
class RigidTransform:
    """Rotation (unit quaternion, wxyz) followed by translation in mm."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=np.float64)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).copy())

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> "RigidTransform":
        return cls(matrix_to_quat(R), t)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.rotation, other.rotation)
        return RigidTransform(q, self.matrix @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        qi = quat_conjugate(self.rotation)
        return RigidTransform(qi, -(quat_to_matrix(qi) @ self.translation))

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=4)
        return f"RigidTransform(rotation={q}, translation={t})"


@dataclass(frozen=True)
class MotionParams:
    """Increment about a reference transform: rotation vector (rad) + mm."""

    axis_angle: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def from_vector(cls, v) -> "MotionParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3].copy(), v[3:6].copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.axis_angle, self.translation]).astype(np.float64)


def exp_update(base: RigidTransform, params: MotionParams) -> RigidTransform:
    """Left-multiply the rotation by ``exp(axis_angle)`` and add the translation."""
    w = np.asarray(params.axis_angle, dtype=np.float64)
    dt = np.asarray(params.translation, dtype=np.float64)
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(dt))):
        raise ValueError("motion parameters must be finite")
    if np.linalg.norm(w) >= np.pi + 1e-12:
        raise ValueError("rotation increment must be smaller than pi")
    q = quat_multiply(axis_angle_to_quat(w), base.rotation)
    return RigidTransform(q, base.translation + dt)


# -- slice geometry ---------------------------------------------------------

@dataclass(frozen=True)
class SliceGeometry:
    """Pixel lattice of one slice and its nominal placement in world space.

    ``slice_gap`` is the centre-to-centre distance between neighbouring
    slices of a stack; it equals the thickness for contiguous slices.
    """

    in_plane_spacing: tuple
    rows: int
    cols: int
    slice_thickness: float
    slice_gap: float
    nominal_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        sp = tuple(float(s) for s in self.in_plane_spacing)
        object.__setattr__(self, "in_plane_spacing", sp)
        if len(sp) != 2 or min(sp) <= 0 or not np.all(np.isfinite(sp)):
            raise ValueError("in_plane_spacing must be two positive numbers")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if not self.slice_thickness > 0:
            raise ValueError("slice_thickness must be positive")
        if not self.slice_gap > 0:
            raise ValueError("slice_gap must be positive")

    def local_coords(self, rows=None, cols=None, depth=0.0):
        """Slice-local mm coordinates (u, v, depth) of pixel centres."""
        r = np.arange(self.rows) if rows is None else np.asarray(rows, dtype=np.float64)
        c = np.arange(self.cols) if cols is None else np.asarray(cols, dtype=np.float64)
        v = (r - (self.rows - 1) / 2.0) * self.in_plane_spacing[0]
        u = (c - (self.cols - 1) / 2.0) * self.in_plane_spacing[1]
        return u, v, depth

    def pixel_grid(self):
        """(rows*cols, 3) local coordinates at zero depth, row major."""
        u, v, _ = self.local_coords()
        vv, uu = np.meshgrid(v, u, indexing="ij")
        return np.stack([uu.ravel(), vv.ravel(), np.zeros(uu.size)], axis=1)


def slice_pose(geom: SliceGeometry, t: RigidTransform) -> RigidTransform:
    """Absolute pose mapping slice-local mm to world mm under motion ``t``."""
    n = geom.nominal_pose
    return RigidTransform(quat_multiply(t.rotation, n.rotation), n.translation + t.translation)


def map_slice_to_world(geom: SliceGeometry, t: RigidTransform, pixel, depth_offset=0.0):
    row, col = pixel
    u, v, _ = geom.local_coords([row], [col])
    local = np.array([u[0], v[0], depth_offset])
    return slice_pose(geom, t).apply(local)


def world_to_slice(geom: SliceGeometry, t: RigidTransform, x):
    """Inverse of :func:`map_slice_to_world`: returns (row, col, depth)."""
    local = slice_pose(geom, t).inverse().apply(np.asarray(x, dtype=np.float64))
    col = local[..., 0] / geom.in_plane_spacing[1] + (geom.cols - 1) / 2.0
    row = local[..., 1] / geom.in_plane_spacing[0] + (geom.rows - 1) / 2.0
    return row, col, local[..., 2]


def transform_jacobian(geom: SliceGeometry, t: RigidTransform, pixel, depth_offset=0.0):
    """3x6 derivative of the world point w.r.t. ``(axis_angle, translation)`` at zero."""
    row, col = pixel
    u, v, _ = geom.local_coords([row], [col])
    local = np.array([u[0], v[0], depth_offset])
    rotated = slice_pose(geom, t).matrix @ local
    return np.hstack([-skew(rotated), np.eye(3)])


def geodesic_errors(a: RigidTransform, b: RigidTransform):
    """(rotation angle of a·b⁻¹ in degrees, translation distance in mm)."""
    q = quat_multiply(a.rotation, quat_conjugate(b.rotation))
    return float(np.degrees(quat_angle(q))), float(np.linalg.norm(a.translation - b.translation))
