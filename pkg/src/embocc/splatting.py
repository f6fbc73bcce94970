"""Gaussian-to-voxel splatting.

Every Gaussian adds ``opacity * exp(-0.5 * d^T Sigma^-1 d) * class_probs`` to
each voxel center it reaches.  :func:`splat` is the compiled kernel used by the
pipeline; :func:`splat_bruteforce` evaluates the same formula over every
(Gaussian, voxel) pair with plain numpy and is the reference for tests.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .gaussians import EMPTY_CLASS, GaussianConfig, SemanticGaussians, activate
from .geometry import normalize_quaternion, rotation_matrix
from .grid import GridGeometry, SemanticVolume, VoxelGrid

CUTOFF_SIGMAS = 3.0
TAU_EMPTY = 1e-4


class SplatError(ValueError):
    pass


def _kernel_inputs(gaussians: SemanticGaussians, config: GaussianConfig | None):
    scale, opacity, probs = activate(gaussians, config)
    if not (np.all(np.isfinite(scale)) and np.all(scale > 0)):
        raise SplatError("non-SPD covariance")
    rot = rotation_matrix(normalize_quaternion(gaussians.rotation))
    # Sigma^-1 = R diag(1/s^2) R^T
    inv_cov = (rot / (scale**2)[:, None, :]) @ np.swapaxes(rot, -1, -2)
    return scale, opacity, probs, inv_cov


@numba.njit(cache=True)
def _splat_kernel(means, inv_cov, opacity, probs, radius, origin, dims, vs, accum):
    n = means.shape[0]
    nc = probs.shape[1]
    for i in range(n):
        mx, my, mz = means[i, 0], means[i, 1], means[i, 2]
        r = radius[i]
        lo = np.zeros(3, np.int64)
        hi = np.zeros(3, np.int64)
        for a in range(3):
            if math.isinf(r):
                lo[a] = 0
                hi[a] = dims[a] - 1
            else:
                lo[a] = max(0, int(math.ceil((means[i, a] - r - origin[a]) / vs - 0.5)))
                hi[a] = min(dims[a] - 1, int(math.floor((means[i, a] + r - origin[a]) / vs - 0.5)))
        a00, a01, a02 = inv_cov[i, 0, 0], inv_cov[i, 0, 1], inv_cov[i, 0, 2]
        a11, a12, a22 = inv_cov[i, 1, 1], inv_cov[i, 1, 2], inv_cov[i, 2, 2]
        r2 = r * r
        for x in range(lo[0], hi[0] + 1):
            dx = origin[0] + (x + 0.5) * vs - mx
            for y in range(lo[1], hi[1] + 1):
                dy = origin[1] + (y + 0.5) * vs - my
                for z in range(lo[2], hi[2] + 1):
                    dz = origin[2] + (z + 0.5) * vs - mz
                    if dx * dx + dy * dy + dz * dz > r2:
                        continue
                    q = a00 * dx * dx + a11 * dy * dy + a22 * dz * dz + 2.0 * (a01 * dx * dy + a02 * dx * dz + a12 * dy * dz)
                    w = opacity[i] * math.exp(-0.5 * q)
                    for c in range(nc):
                        accum[x, y, z, c] += w * probs[i, c]


def splat(
    gaussians: SemanticGaussians,
    geometry: GridGeometry,
    cutoff_sigmas: float = CUTOFF_SIGMAS,
    config: GaussianConfig | None = None,
) -> SemanticVolume:
    """Accumulate class mass of ``gaussians`` (world frame) on ``geometry``.

    A Gaussian only reaches voxel centers within ``cutoff_sigmas`` times its
    largest activated scale; ``math.inf`` disables the cutoff.
    """
    if not cutoff_sigmas > 0:
        raise ValueError("cutoff_sigmas must be positive or inf")
    config = config or GaussianConfig()
    vol = SemanticVolume.zeros(geometry, config.num_classes)
    if not gaussians.is_batch or len(gaussians) == 0:
        return vol
    scale, opacity, probs, inv_cov = _kernel_inputs(gaussians, config)
    radius = cutoff_sigmas * scale.max(axis=1)
    _splat_kernel(
        np.ascontiguousarray(gaussians.mean),
        np.ascontiguousarray(inv_cov),
        np.ascontiguousarray(opacity),
        np.ascontiguousarray(probs),
        np.ascontiguousarray(radius, dtype=np.float64),
        np.array(geometry.origin, dtype=np.float64),
        np.array(geometry.dims, dtype=np.int64),
        geometry.voxel_size,
        vol.accum,
    )
    return vol


def splat_bruteforce(
    gaussians: SemanticGaussians, geometry: GridGeometry, config: GaussianConfig | None = None
) -> SemanticVolume:
    """Reference splat: every Gaussian against every voxel center, no cutoff."""
    config = config or GaussianConfig()
    vol = SemanticVolume.zeros(geometry, config.num_classes)
    if len(gaussians) == 0:
        return vol
    scale, opacity, probs, _ = _kernel_inputs(gaussians, config)
    centers = geometry.centers().reshape(-1, 3)
    flat = vol.accum.reshape(-1, config.num_classes)
    rot = rotation_matrix(normalize_quaternion(gaussians.rotation))
    for i in range(len(gaussians)):
        # Mahalanobis distance via the Gaussian's local frame
        local = (centers - gaussians.mean[i]) @ rot[i] / scale[i]
        w = opacity[i] * np.exp(-0.5 * np.sum(local * local, axis=1))
        flat += w[:, None] * probs[i][None, :]
    return vol


def labels_from_volume(vol: SemanticVolume, tau_empty: float = TAU_EMPTY) -> VoxelGrid:
    """Argmax read-out with ties to the lowest class; voxels whose total mass
    is below ``tau_empty`` are empty."""
    labels = np.argmax(vol.accum, axis=-1).astype(np.uint8)
    labels[vol.accum.sum(axis=-1) < tau_empty] = EMPTY_CLASS
    return VoxelGrid(vol.geometry, labels)
