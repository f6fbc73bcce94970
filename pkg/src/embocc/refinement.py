"""Staged, confidence-damped Gaussian updates and the depth-oracle refiner.

A refiner maps camera-frame Gaussians plus an observation to per-Gaussian
deltas.  :func:`refine_frustum` runs it for a fixed number of stages, damping
each delta by ``1 - theta`` where ``theta`` depends on the Gaussian's tag and
the stage.  :class:`OracleRefiner` stands in for a learned network: it reads
the rendered depth and semantics and pushes each Gaussian toward the empty
class, onto the observed surface, or leaves it alone.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import geometry as geo
from .gaussians import EMPTY_CLASS, GaussianConfig, SemanticGaussians


@dataclass
class GaussianDelta:
    """Update amounts; like :class:`SemanticGaussians` it may be a batch."""

    d_mean: np.ndarray
    d_scale_raw: np.ndarray
    d_rotation: np.ndarray
    d_opacity_raw: np.ndarray
    d_logits: np.ndarray

    @classmethod
    def zeros_like(cls, g: SemanticGaussians) -> "GaussianDelta":
        rot = np.zeros_like(g.rotation)
        rot[..., 0] = 1.0
        return cls(
            np.zeros_like(g.mean),
            np.zeros_like(g.scale_raw),
            rot,
            np.zeros_like(g.opacity_raw),
            np.zeros_like(g.logits),
        )

    def __getitem__(self, idx) -> "GaussianDelta":
        return GaussianDelta(
            self.d_mean[idx], self.d_scale_raw[idx], self.d_rotation[idx], self.d_opacity_raw[idx], self.d_logits[idx]
        )


@dataclass
class Observation:
    depth: np.ndarray  # (H, W) z-depth in meters, 0 = no hit
    semantics: np.ndarray  # (H, W) class indices
    K: geo.Intrinsics
    pose: geo.Pose

    def __post_init__(self):
        self.depth = np.asarray(self.depth)
        self.semantics = np.asarray(self.semantics, dtype=np.uint8)
        expected = (self.K.height, self.K.width)
        if self.depth.shape != expected or self.semantics.shape != expected:
            raise ValueError(f"observation arrays must have shape {expected}")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")


@dataclass
class ConfidenceSchedule:
    theta_tagged: list = field(default_factory=lambda: [0.0, 0.0, 0.5])
    theta_untagged: list = field(default_factory=lambda: [0.0, 0.0, 0.0])

    def __post_init__(self):
        self.theta_tagged = [float(t) for t in self.theta_tagged]
        self.theta_untagged = [float(t) for t in self.theta_untagged]
        if len(self.theta_tagged) != len(self.theta_untagged):
            raise ValueError("tagged and untagged schedules must have equal length")
        if not all(0.0 <= t <= 1.0 for t in self.theta_tagged + self.theta_untagged):
            raise ValueError("confidence values must lie in [0, 1]")

    @property
    def stages(self) -> int:
        return len(self.theta_tagged)

    @classmethod
    def constant(cls, theta: float, stages: int = 3) -> "ConfidenceSchedule":
        return cls([theta] * stages, [theta] * stages)

    def thetas(self, tags, stage: int) -> np.ndarray:
        tags = np.asarray(tags)
        return np.where(tags != 0, self.theta_tagged[stage], self.theta_untagged[stage])


class DepthRelation(enum.IntEnum):
    FRONT = 0
    SURFACE = 1
    OCCLUDED = 2
    NO_DEPTH = 3


def sample_depth(obs: Observation, u, v):
    """Nearest-pixel depth lookup, with ``(u, v)`` clamped into the image."""
    col = np.clip(np.floor(np.asarray(u, dtype=np.float64) + 0.5), 0, obs.K.width - 1).astype(np.int64)
    row = np.clip(np.floor(np.asarray(v, dtype=np.float64) + 0.5), 0, obs.K.height - 1).astype(np.int64)
    return obs.depth[row, col]


def _pixel(obs: Observation, u, v):
    col = np.clip(np.floor(np.asarray(u, dtype=np.float64) + 0.5), 0, obs.K.width - 1).astype(np.int64)
    row = np.clip(np.floor(np.asarray(v, dtype=np.float64) + 0.5), 0, obs.K.height - 1).astype(np.int64)
    return row, col


def classify_depth_relation(z, d, delta_front: float = 0.04, band_behind: float = 0.24):
    """Where a Gaussian at depth ``z`` sits relative to the observed depth ``d``."""
    z = np.asarray(z, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    rel = np.where(
        z < d - delta_front,
        DepthRelation.FRONT,
        np.where(z <= d + band_behind, DepthRelation.SURFACE, DepthRelation.OCCLUDED),
    )
    rel = np.where(d == 0, DepthRelation.NO_DEPTH, rel)
    if rel.ndim == 0:
        return DepthRelation(int(rel))
    return rel.astype(np.int8)


@dataclass
class OracleParams:
    delta_front: float = 0.04
    band_behind: float = 0.24
    beta: float = 10.0
    opacity_target_raw: float = 4.0
    s_surface: float = 0.05


class Refiner(Protocol):
    def __call__(self, view: SemanticGaussians, obs: Observation, stage: int) -> GaussianDelta: ...


class OracleRefiner:
    """Deterministic refiner driven by ground-truth depth and semantics.

    Front Gaussians become opaque carriers of the empty class; surface
    Gaussians slide along their pixel ray onto the observed surface and take
    its class; occluded, depth-less, behind-camera and out-of-image Gaussians
    get a zero delta.
    """

    def __init__(self, params: OracleParams | None = None, config: GaussianConfig | None = None):
        self.params = params or OracleParams()
        self.config = config or GaussianConfig()
        self._surface_scale_raw = self.config.raw_scale(self.params.s_surface)

    def relations(self, view: SemanticGaussians, obs: Observation) -> np.ndarray:
        u, v, z, behind = geo.project_to_pixel(view.mean, obs.K)
        with np.errstate(invalid="ignore"):
            in_image = ~behind & (u >= 0) & (u < obs.K.width) & (v >= 0) & (v < obs.K.height)
        d = np.where(in_image, sample_depth(obs, np.nan_to_num(u), np.nan_to_num(v)), 0.0)
        rel = np.asarray(classify_depth_relation(np.where(in_image, z, 1.0), d, self.params.delta_front, self.params.band_behind))
        return np.where(in_image, rel, DepthRelation.NO_DEPTH).astype(np.int8)

    def __call__(self, view: SemanticGaussians, obs: Observation, stage: int = 0) -> GaussianDelta:
        p = self.params
        delta = GaussianDelta.zeros_like(view)
        if view.is_batch and len(view) == 0:
            return delta
        rel = self.relations(view, obs)
        front = rel == DepthRelation.FRONT
        surface = rel == DepthRelation.SURFACE
        touched = front | surface

        u, v, z, _ = geo.project_to_pixel(view.mean, obs.K)
        row, col = _pixel(obs, np.nan_to_num(u), np.nan_to_num(v))
        d = obs.depth[row, col]
        target_class = np.where(surface, obs.semantics[row, col], EMPTY_CLASS)

        num_classes = view.logits.shape[-1]
        onehot = (np.arange(num_classes) == np.asarray(target_class)[..., None]) * p.beta
        delta.d_logits = np.where(touched[..., None], onehot - view.logits, 0.0)
        delta.d_opacity_raw = np.where(touched, p.opacity_target_raw - view.opacity_raw, 0.0)

        safe_z = np.where(surface, z, 1.0)
        on_surface = view.mean * (d / safe_z)[..., None]
        delta.d_mean = np.where(surface[..., None], on_surface - view.mean, 0.0)
        delta.d_scale_raw = np.where(surface[..., None], self._surface_scale_raw - view.scale_raw, 0.0)
        return delta


def oracle_delta(
    g_cam: SemanticGaussians,
    obs: Observation,
    params: OracleParams | None = None,
    config: GaussianConfig | None = None,
) -> GaussianDelta:
    return OracleRefiner(params, config)(g_cam, obs)


def scale_delta(d: GaussianDelta, theta) -> GaussianDelta:
    """Damp a delta by confidence ``theta``: additive parts times ``1 - theta``,
    rotation slerped from identity by ``1 - theta``."""
    keep = 1.0 - np.asarray(theta, dtype=np.float64)
    return GaussianDelta(
        d.d_mean * keep[..., None],
        d.d_scale_raw * keep[..., None],
        geo.quaternion_power(d.d_rotation, keep),
        d.d_opacity_raw * keep,
        d.d_logits * keep[..., None],
    )


def apply_delta(g: SemanticGaussians, d: GaussianDelta) -> SemanticGaussians:
    """Add the additive parts and left-compose the rotation delta.

    An exactly-identity rotation delta keeps the stored quaternion bit-for-bit
    instead of renormalizing it.
    """
    identity = np.all(d.d_rotation == geo.IDENTITY_QUAT, axis=-1, keepdims=True)
    composed = geo.normalize_quaternion(geo.quaternion_product(d.d_rotation, g.rotation))
    return SemanticGaussians(
        mean=g.mean + d.d_mean,
        scale_raw=g.scale_raw + d.d_scale_raw,
        rotation=np.where(identity, g.rotation, composed),
        opacity_raw=g.opacity_raw + d.d_opacity_raw,
        logits=g.logits + d.d_logits,
        tag=g.tag.copy(),
    )


def refine_frustum(
    view: SemanticGaussians,
    tags,
    obs: Observation,
    schedule: ConfidenceSchedule | None = None,
    refiner: Refiner | None = None,
) -> SemanticGaussians:
    """Run every refinement stage over camera-frame Gaussians.

    ``tags`` decides which confidence row of ``schedule`` applies to each
    Gaussian; the output keeps the input order.
    """
    schedule = schedule or ConfidenceSchedule()
    refiner = refiner or OracleRefiner()
    tags = np.asarray(tags)
    if tags.shape != view.opacity_raw.shape:
        raise ValueError("tags and Gaussians must have the same length")
    current = view.copy()
    for stage in range(schedule.stages):
        delta = refiner(current, obs, stage)
        current = apply_delta(current, scale_delta(delta, schedule.thetas(tags, stage)))
    return current
