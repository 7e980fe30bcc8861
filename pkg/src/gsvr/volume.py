"""Voxel volumes and grid specifications."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel lattice; voxel (a, b, c) sits at origin + spacing * (a, b, c)."""

    origin: tuple
    spacing: tuple
    dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.origin) != 3 or len(self.spacing) != 3 or len(self.dims) != 3:
            raise ValueError("grid origin, spacing and dims must have three entries")
        if not all(np.isfinite(self.origin)):
            raise ValueError("grid origin must be finite")
        if not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise ValueError("grid spacing must be positive")
        if min(self.dims) < 1:
            raise ValueError("grid dims must be positive")

    @classmethod
    def centered(cls, dims, spacing) -> "GridSpec":
        dims = tuple(int(d) for d in dims)
        spacing = tuple(float(s) for s in np.broadcast_to(spacing, 3))
        origin = tuple(-(d - 1) / 2.0 * s for d, s in zip(dims, spacing))
        return cls(origin, spacing, dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def axes(self):
        return [self.origin[k] + self.spacing[k] * np.arange(self.dims[k]) for k in range(3)]

    def points(self) -> np.ndarray:
        """World coordinates of all voxel centres, C order, shape (N, 3)."""
        ax = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([a.ravel() for a in ax], axis=1)

    def bounds(self):
        lo = np.asarray(self.origin)
        hi = lo + np.asarray(self.spacing) * (np.asarray(self.dims) - 1)
        return lo, hi

    def world_to_index(self, x):
        return (np.asarray(x, dtype=np.float64) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def crop(self, start, size) -> "GridSpec":
        start = np.asarray(start, dtype=int)
        origin = np.asarray(self.origin) + start * np.asarray(self.spacing)
        return GridSpec(tuple(origin), self.spacing, tuple(int(s) for s in size))

    def coarsen(self, factor: int) -> "GridSpec":
        """Same extent sampled every ``factor`` voxels along each axis."""
        if factor == 1:
            return self
        dims = tuple(max(1, (d - 1) // factor + 1) for d in self.dims)
        return GridSpec(self.origin, tuple(s * factor for s in self.spacing), dims)


@dataclass
class VoxelVolume:
    """Intensities on a :class:`GridSpec`; ``data[a, b, c]`` is voxel (a, b, c)."""

    data: np.ndarray
    grid: GridSpec
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape != self.grid.dims:
            raise ValueError(f"data shape {self.data.shape} does not match grid dims {self.grid.dims}")

    @property
    def origin(self):
        return self.grid.origin

    @property
    def spacing(self):
        return self.grid.spacing

    @property
    def dims(self):
        return self.grid.dims

    def sample(self, points, order=1):
        """Trilinear (order 1) interpolation at world points; zero outside."""
        from scipy.ndimage import map_coordinates

        idx = self.grid.world_to_index(points)
        return map_coordinates(np.asarray(self.data, dtype=np.float64), idx.T,
                               order=order, mode="constant", cval=0.0)
