"""Dense voxel grids shared by splatting, datasets and metrics.

Arrays are indexed ``[x, y, z]``; the flat on-disk order ``x + X*(y + Y*z)``
is numpy's Fortran order for that layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridGeometry:
    origin: tuple  # min corner, meters
    dims: tuple  # (X, Y, Z)
    voxel_size: float

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"bad grid dims {self.dims}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")

    @property
    def shape(self) -> tuple:
        return self.dims

    @property
    def count(self) -> int:
        return int(np.prod(self.dims))

    @property
    def extent(self) -> np.ndarray:
        return np.array(self.dims) * self.voxel_size

    @property
    def bounds(self) -> np.ndarray:
        lo = np.array(self.origin)
        return np.stack([lo, lo + self.extent])

    def matches(self, other: "GridGeometry", tol: float = 1e-5) -> bool:
        """Same lattice up to f32 storage rounding."""
        return (
            self.dims == other.dims
            and abs(self.voxel_size - other.voxel_size) <= tol * self.voxel_size
            and np.allclose(self.origin, other.origin, atol=tol)
        )

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def centers(self) -> np.ndarray:
        """Voxel centers, shape ``(X, Y, Z, 3)``."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        return np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)

    def voxel_of(self, points) -> np.ndarray:
        """Integer voxel index containing each point (unclipped)."""
        p = np.asarray(points, dtype=np.float64)
        return np.floor((p - np.array(self.origin)) / self.voxel_size).astype(np.int64)

    def contains_index(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.array(self.dims)), axis=-1)


@dataclass
class VoxelGrid:
    geometry: GridGeometry
    labels: np.ndarray  # uint8, shape dims

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.geometry.dims:
            raise ValueError(f"labels shape {self.labels.shape} != dims {self.geometry.dims}")

    @classmethod
    def empty(cls, geometry: GridGeometry) -> "VoxelGrid":
        return cls(geometry, np.zeros(geometry.dims, dtype=np.uint8))

    @property
    def dims(self):
        return self.geometry.dims

    @property
    def origin(self):
        return self.geometry.origin

    @property
    def voxel_size(self):
        return self.geometry.voxel_size

    def flat_labels(self) -> np.ndarray:
        return self.labels.ravel(order="F")

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.geometry, self.labels.copy())


@dataclass
class SemanticVolume:
    geometry: GridGeometry
    accum: np.ndarray  # float64, shape dims + (C,)

    @classmethod
    def zeros(cls, geometry: GridGeometry, num_classes: int) -> "SemanticVolume":
        return cls(geometry, np.zeros(geometry.dims + (num_classes,), dtype=np.float64))


def crop(grid_array: np.ndarray, start, dims) -> np.ndarray:
    """Sub-block ``[start, start + dims)`` of an ``[x, y, z]`` array; parts
    outside the source are zero-filled."""
    start = np.asarray(start, dtype=np.int64)
    dims = np.asarray(dims, dtype=np.int64)
    out = np.zeros(tuple(dims) + grid_array.shape[3:], dtype=grid_array.dtype)
    src_lo = np.maximum(start, 0)
    src_hi = np.minimum(start + dims, grid_array.shape[:3])
    if np.any(src_hi <= src_lo):
        return out
    dst_lo = src_lo - start
    dst_hi = dst_lo + (src_hi - src_lo)
    out[dst_lo[0] : dst_hi[0], dst_lo[1] : dst_hi[1], dst_lo[2] : dst_hi[2]] = grid_array[
        src_lo[0] : src_hi[0], src_lo[1] : src_hi[1], src_lo[2] : src_hi[2]
    ]
    return out
