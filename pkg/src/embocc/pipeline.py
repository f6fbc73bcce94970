"""Local prediction and the embodied memory recurrence.

``run_local`` predicts one frame's 60x60x36 local box from freshly placed
camera-frame Gaussians.  ``run_embodied_step`` folds one frame into a
persistent :class:`GaussianMemory`: select the Gaussians in the frustum,
refine them with tag-dependent confidence, write them back, and splat the
whole memory into the global grid.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .dataset import (
    DEFAULT_FRAMES,
    CameraFrame,
    GlobalScene,
    LocalBox,
    local_box_for_frame,
    splice_masks,
    visibility_mask,
)
from .gaussians import (
    GaussianConfig,
    GaussianMemory,
    SemanticGaussians,
    fresh_gaussians,
    init_memory_uniform,
    lattice_centers,
    select_frustum,
    write_back,
)
from .grid import VoxelGrid, crop
from .metrics import ScoreReport, score
from .refinement import ConfidenceSchedule, Observation, OracleParams, OracleRefiner, refine_frustum
from .splatting import CUTOFF_SIGMAS, TAU_EMPTY, labels_from_volume, splat

log = logging.getLogger(__name__)


@dataclass
class RunConfig:
    gaussian: GaussianConfig = field(default_factory=GaussianConfig)
    schedule: ConfidenceSchedule = field(default_factory=ConfidenceSchedule)
    oracle: OracleParams = field(default_factory=OracleParams)
    cutoff_sigmas: float = CUTOFF_SIGMAS
    tau_empty: float = TAU_EMPTY
    seed: int = 0
    frames: list | None = None  # None means every frame of the scene, in order
    z_near: float = geo.Z_NEAR
    z_far: float = geo.Z_FAR
    splat_tagged_only: bool = False

    def frame_list(self, n_available: int) -> list:
        frames = list(range(min(DEFAULT_FRAMES, n_available))) if self.frames is None else list(self.frames)
        bad = [i for i in frames if not 0 <= i < n_available]
        if bad:
            raise ValueError(f"frame indices out of range: {bad}")
        return frames

    def refiner(self) -> OracleRefiner:
        return OracleRefiner(self.oracle, self.gaussian)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d["gaussian"] = GaussianConfig(**d.get("gaussian", {}))
        d["schedule"] = ConfidenceSchedule(**d.get("schedule", {}))
        d["oracle"] = OracleParams(**d.get("oracle", {}))
        return cls(**d)


@dataclass
class EmbodiedState:
    memory: GaussianMemory
    processed_masks: list = field(default_factory=list)
    frame_cursor: int = 0

    @classmethod
    def for_scene(cls, scene: GlobalScene, cfg: RunConfig) -> "EmbodiedState":
        return cls(init_memory_uniform(scene.bounds, cfg.gaussian))

    @property
    def explored_mask(self) -> np.ndarray:
        return splice_masks(self.processed_masks)


def local_lattice_counts(box: LocalBox, count: int) -> np.ndarray:
    """Per-axis Gaussian counts whose product is closest to ``count`` for a
    near-isotropic lattice filling the box (16200 -> 30 x 30 x 18)."""
    extent = np.array(box.dims) * box.global_geometry.voxel_size
    spacing = (np.prod(extent) / count) ** (1.0 / 3.0)
    return np.maximum(np.round(extent / spacing).astype(int), 1)


def local_gaussians(frame: CameraFrame, box: LocalBox, cfg: RunConfig) -> SemanticGaussians:
    """Fresh prior Gaussians filling ``box``, expressed in the camera frame."""
    counts = local_lattice_counts(box, cfg.gaussian.local_count)
    extent = np.array(box.dims) * box.global_geometry.voxel_size
    means = lattice_centers(box.origin, counts, extent / counts)
    g = fresh_gaussians(geo.world_to_camera(means, frame.pose), cfg.gaussian)
    return g


def _to_world(g: SemanticGaussians, pose: geo.Pose) -> SemanticGaussians:
    out = g.copy()
    out.mean = geo.camera_to_world(g.mean, pose)
    out.rotation = geo.normalize_quaternion(geo.quaternion_product(pose.quaternion, g.rotation))
    return out


def run_local(frame: CameraFrame, obs: Observation, cfg: RunConfig | None = None, box: LocalBox | None = None) -> VoxelGrid:
    """Single-frame prediction over the frame's local box (60 x 60 x 36)."""
    cfg = cfg or RunConfig()
    if box is None:
        raise ValueError("run_local needs the frame's local box")
    view = local_gaussians(frame, box, cfg)
    refined = refine_frustum(view, view.tag, obs, cfg.schedule, cfg.refiner())
    vol = splat(_to_world(refined, frame.pose), box.geometry, cfg.cutoff_sigmas, cfg.gaussian)
    return labels_from_volume(vol, cfg.tau_empty)


def local_ground_truth(scene: GlobalScene, box: LocalBox) -> VoxelGrid:
    return VoxelGrid(box.geometry, crop(scene.grid.labels, box.start, box.dims))


def local_mask(global_mask: np.ndarray, box: LocalBox) -> np.ndarray:
    return crop(global_mask, box.start, box.dims)


def run_local_scored(scene: GlobalScene, index: int, cfg: RunConfig | None = None):
    """Local prediction for frame ``index`` scored inside its box-and-frustum mask."""
    cfg = cfg or RunConfig()
    frame = scene.frames[index]
    box = local_box_for_frame(frame, scene)
    pred = run_local(frame, frame.observation(), cfg, box)
    mask = local_mask(visibility_mask(frame, box, scene), box)
    return pred, score(pred, local_ground_truth(scene, box), mask)


def global_readout(memory: GaussianMemory, geometry, cfg: RunConfig) -> VoxelGrid:
    g = memory.gaussians
    if cfg.splat_tagged_only:
        g = g.take(np.flatnonzero(g.tag))
    return labels_from_volume(splat(g, geometry, cfg.cutoff_sigmas, cfg.gaussian), cfg.tau_empty)


def run_embodied_step(
    state: EmbodiedState, frame: CameraFrame, obs: Observation, cfg: RunConfig, scene: GlobalScene
) -> VoxelGrid:
    """Fold one observation into the memory and return the global read-out."""
    indices, view = select_frustum(state.memory, frame.pose, frame.K, cfg.z_near, cfg.z_far)
    refined = refine_frustum(view, view.tag, obs, cfg.schedule, cfg.refiner())
    write_back(state.memory, indices, refined, frame.pose)
    state.processed_masks.append(visibility_mask(frame, local_box_for_frame(frame, scene), scene))
    state.frame_cursor += 1
    return global_readout(state.memory, scene.geometry, cfg)


@dataclass
class SequenceResult:
    grid: VoxelGrid
    reports: list
    state: EmbodiedState
    frames: list


def run_sequence(scene: GlobalScene, cfg: RunConfig | None = None, on_step=None) -> SequenceResult:
    """Process ``cfg.frames`` on a fresh memory, scoring after every step
    against the ground truth under the union of processed masks.

    ``on_step(step, frame_index, grid, report, state)`` is called after each step.
    """
    cfg = cfg or RunConfig()
    frames = cfg.frame_list(len(scene.frames))
    state = EmbodiedState.for_scene(scene, cfg)
    grid = global_readout(state.memory, scene.geometry, cfg)
    reports = []
    for step, i in enumerate(frames):
        frame = scene.frames[i]
        grid = run_embodied_step(state, frame, frame.observation(), cfg, scene)
        report = score(grid, scene.grid, state.explored_mask)
        reports.append(report)
        log.debug("step %d frame %d miou %.4f iou %.4f", step, i, report.miou, report.iou)
        if on_step is not None:
            on_step(step, i, grid, report, state)
    return SequenceResult(grid, reports, state, frames)


def sequence_runner(cfg: RunConfig):
    """Adapter for :func:`metrics.lookback_eval`: ``(scene, frames) -> grid``."""

    def run(scene: GlobalScene, frames) -> VoxelGrid:
        return run_sequence(scene, dataclasses.replace(cfg, frames=list(frames))).grid

    return run


def final_score(scene: GlobalScene, cfg: RunConfig) -> ScoreReport:
    return run_sequence(scene, cfg).reports[-1]


def snapshot(memory: GaussianMemory, path) -> None:
    """Write ``memory`` as a GMEM1 file."""
    from .formats import save_memory

    save_memory(memory, path)


def restore(path, config: GaussianConfig | None = None) -> GaussianMemory:
    from .formats import load_memory

    return load_memory(path, config)


def _seed_job(args):
    seed, cfg, extent = args
    from .dataset import make_scene

    scene = make_scene(seed, extent) if extent is not None else make_scene(seed)
    result = run_sequence(scene, cfg)
    return seed, result.grid, result.reports


def run_seeds(seeds, cfg: RunConfig | None = None, jobs: int = 1, extent=None) -> dict:
    """Run independent seeds, optionally across ``jobs`` worker processes.

    Returns ``{seed: (final grid, per-step reports)}``; each seed's result is
    independent of the worker count.
    """
    cfg = cfg or RunConfig()
    tasks = [(int(s), cfg, extent) for s in seeds]
    if jobs <= 1 or len(tasks) <= 1:
        results = [_seed_job(t) for t in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_seed_job, tasks))
    return {seed: (grid, reports) for seed, grid, reports in results}
