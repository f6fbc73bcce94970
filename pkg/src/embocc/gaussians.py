"""Semantic Gaussians and the persistent per-scene Gaussian memory.

Gaussians are stored structure-of-arrays: one :class:`SemanticGaussians`
holds ``N`` primitives with fields of shape ``(N, ...)``.  Indexing with an
integer yields a single Gaussian whose fields drop the leading axis, so the
same functions work on one primitive or on a batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit, softmax

from . import geometry as geo

NUM_CLASSES = 12
EMPTY_CLASS = 0
CLASS_NAMES = (
    "empty",
    "ceiling",
    "floor",
    "wall",
    "window",
    "chair",
    "bed",
    "sofa",
    "table",
    "tvs",
    "furniture",
    "objects",
)


class SceneTooSmallError(ValueError):
    pass


@dataclass
class GaussianConfig:
    s_min: float = 0.01
    s_max: float = 0.08
    interval: float = 0.16
    local_count: int = 16200
    num_classes: int = NUM_CLASSES
    empty_class: int = EMPTY_CLASS
    random_init: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.s_min < self.s_max:
            raise ValueError("need 0 < s_min < s_max")
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        if self.local_count <= 0:
            raise ValueError("local_count must be positive")

    def raw_scale(self, scale) -> np.ndarray:
        """Inverse of the bounded scale activation."""
        scale = np.asarray(scale, dtype=np.float64)
        frac = (scale - self.s_min) / (self.s_max - self.s_min)
        if np.any((frac <= 0) | (frac >= 1)):
            raise ValueError(f"scale must lie strictly inside ({self.s_min}, {self.s_max})")
        return logit(frac)


_FIELDS = ("mean", "scale_raw", "rotation", "opacity_raw", "logits", "tag")


@dataclass
class SemanticGaussians:
    mean: np.ndarray
    scale_raw: np.ndarray
    rotation: np.ndarray
    opacity_raw: np.ndarray
    logits: np.ndarray
    tag: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale_raw = np.asarray(self.scale_raw, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.opacity_raw = np.asarray(self.opacity_raw, dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.tag = np.asarray(self.tag, dtype=np.uint8)

    @classmethod
    def empty(cls, num_classes: int = NUM_CLASSES) -> "SemanticGaussians":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, num_classes)), np.zeros(0)
        )

    @classmethod
    def single(cls, mean, scale_raw=(0.0, 0.0, 0.0), rotation=geo.IDENTITY_QUAT, opacity_raw=0.0, logits=None, tag=0):
        if logits is None:
            logits = np.zeros(NUM_CLASSES)
        return cls(mean, scale_raw, rotation, opacity_raw, logits, tag)

    @classmethod
    def stack(cls, items) -> "SemanticGaussians":
        items = list(items)
        return cls(*(np.stack([getattr(g, f) for g in items]) for f in _FIELDS))

    @property
    def is_batch(self) -> bool:
        return self.opacity_raw.ndim == 1

    def __len__(self) -> int:
        if not self.is_batch:
            raise TypeError("a single Gaussian has no length")
        return self.opacity_raw.shape[0]

    def __getitem__(self, idx) -> "SemanticGaussians":
        return SemanticGaussians(*(getattr(self, f)[idx] for f in _FIELDS))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def copy(self) -> "SemanticGaussians":
        return SemanticGaussians(*(getattr(self, f).copy() for f in _FIELDS))

    def take(self, indices) -> "SemanticGaussians":
        indices = np.asarray(indices, dtype=np.int64)
        return SemanticGaussians(*(getattr(self, f)[indices].copy() for f in _FIELDS))

    def put(self, indices, other: "SemanticGaussians") -> None:
        for f in _FIELDS:
            getattr(self, f)[indices] = getattr(other, f)

    def equals(self, other: "SemanticGaussians") -> bool:
        """Bit-exact equality of every field."""
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _FIELDS)


def activate(g: SemanticGaussians, config: GaussianConfig | None = None):
    """Map raw parameters to ``(scale, opacity, class_probs)``."""
    config = config or GaussianConfig()
    scale = config.s_min + (config.s_max - config.s_min) * expit(g.scale_raw)
    opacity = expit(g.opacity_raw)
    probs = softmax(g.logits, axis=-1)
    return scale, opacity, probs


def covariance(g: SemanticGaussians, config: GaussianConfig | None = None) -> np.ndarray:
    """``R diag(s)^2 R^T`` from the activated scale."""
    scale, _, _ = activate(g, config)
    rot = geo.rotation_matrix(geo.normalize_quaternion(g.rotation))
    return (rot * (scale**2)[..., None, :]) @ np.swapaxes(rot, -1, -2)


@dataclass
class GaussianMemory:
    gaussians: SemanticGaussians
    bounds: np.ndarray  # (2, 3): min corner, max corner
    interval: float
    config: GaussianConfig = field(default_factory=GaussianConfig)

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)

    def __len__(self) -> int:
        return len(self.gaussians)

    def copy(self) -> "GaussianMemory":
        return replace(self, gaussians=self.gaussians.copy(), bounds=self.bounds.copy())


def lattice_centers(lo, counts, spacing) -> np.ndarray:
    """Cell centers of a regular lattice, x varying fastest."""
    lo = np.asarray(lo, dtype=np.float64)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    axes = [lo[i] + (np.arange(counts[i]) + 0.5) * spacing[i] for i in range(3)]
    zz, yy, xx = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=-1)


def fresh_gaussians(means: np.ndarray, config: GaussianConfig, rng: np.random.Generator | None = None):
    """Untagged prior Gaussians at ``means``: identity rotation, opacity 0.5,
    mid-range scale and uniform (or seeded-random) logits."""
    n = len(means)
    if rng is not None:
        logits = rng.normal(size=(n, config.num_classes))
    else:
        logits = np.zeros((n, config.num_classes))
    return SemanticGaussians(
        mean=np.array(means, dtype=np.float64),
        scale_raw=np.zeros((n, 3)),
        rotation=np.tile(geo.IDENTITY_QUAT, (n, 1)),
        opacity_raw=np.zeros(n),
        logits=logits,
        tag=np.zeros(n, dtype=np.uint8),
    )


def init_memory_uniform(bounds, config: GaussianConfig | None = None) -> GaussianMemory:
    """Fill ``bounds`` with Gaussians on a regular ``config.interval`` lattice."""
    config = config or GaussianConfig()
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    extent = bounds[1] - bounds[0]
    # tolerate float noise such as 4.8 / 0.16 = 29.999999999999996
    counts = np.floor(extent / config.interval + 1e-9).astype(int)
    if np.any(counts < 1):
        raise SceneTooSmallError("scene too small")
    means = lattice_centers(bounds[0], counts, config.interval)
    rng = np.random.default_rng(config.seed) if config.random_init else None
    return GaussianMemory(fresh_gaussians(means, config, rng), bounds, config.interval, config)


def _pose_rotation_quat(pose: geo.Pose) -> np.ndarray:
    return pose.quaternion


def select_frustum(memory: GaussianMemory, pose: geo.Pose, K: geo.Intrinsics, z_near=geo.Z_NEAR, z_far=geo.Z_FAR):
    """Indices of Gaussians whose mean is inside the frustum and camera-frame
    copies of them; ``memory`` is not modified."""
    mask = geo.in_frustum(memory.gaussians.mean, pose, K, z_near, z_far)
    indices = np.flatnonzero(mask)
    view = memory.gaussians.take(indices)
    view.mean = geo.world_to_camera(view.mean, pose)
    if len(indices):
        q_inv = geo.quaternion_conjugate(_pose_rotation_quat(pose))
        view.rotation = geo.normalize_quaternion(geo.quaternion_product(q_inv, view.rotation))
    return indices, view


def write_back(memory: GaussianMemory, indices, updated: SemanticGaussians, pose: geo.Pose) -> None:
    """Return camera-frame Gaussians to world frame in place, clamp means to the
    scene bounds and mark them as updated.

    Every written-back Gaussian is tagged, occluded ones included, even though
    the refiner gave them no evidence; their later updates are damped too.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) != len(updated):
        raise ValueError(f"length mismatch: {len(indices)} indices for {len(updated)} Gaussians")
    if len(indices) == 0:
        return
    world = updated.copy()
    world.mean = np.clip(geo.camera_to_world(world.mean, pose), memory.bounds[0], memory.bounds[1])
    world.rotation = geo.normalize_quaternion(geo.quaternion_product(_pose_rotation_quat(pose), world.rotation))
    world.tag = np.ones(len(indices), dtype=np.uint8)
    memory.gaussians.put(indices, world)
