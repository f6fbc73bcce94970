"""Synthetic indoor scenes, camera trajectories, rendering and masks.

A scene is a ground-truth :class:`VoxelGrid` at 0.08 m plus a list of posed
frames.  Observations (z-depth and semantics) come from a voxel ray caster;
per-frame visibility masks mark global voxels inside both the frame's local
box and its frustum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .gaussians import EMPTY_CLASS
from .grid import GridGeometry, VoxelGrid
from .refinement import Observation

VOXEL_SIZE = 0.08
LOCAL_DIMS = (60, 60, 36)
LOCAL_AHEAD = 2.4
DEFAULT_EXTENT = (5.6, 5.6, 2.88)
DEFAULT_FRAMES = 30
RENDER_MAX_DEPTH = 10.0
KNN_MAX_DISTANCE = 0.24
HIT_INSET = 1e-3  # reported depth lies this far (in z) past the hit voxel's entry face

CEILING, FLOOR, WALL = 1, 2, 3
CHAIR, BED, SOFA, TABLE, FURNITURE, OBJECTS = 5, 6, 7, 8, 10, 11

# (min, max) footprint x, footprint y and height in meters
OBJECT_SIZES = {
    CHAIR: ((0.45, 0.6), (0.45, 0.6), (0.8, 1.0)),
    BED: ((1.4, 2.0), (1.0, 1.6), (0.4, 0.6)),
    SOFA: ((1.4, 2.0), (0.7, 0.9), (0.7, 0.9)),
    TABLE: ((0.8, 1.4), (0.6, 0.9), (0.7, 0.8)),
    FURNITURE: ((0.6, 1.2), (0.4, 0.6), (0.8, 1.1)),
    OBJECTS: ((0.2, 0.4), (0.2, 0.4), (0.2, 0.4)),
}


class SceneError(ValueError):
    pass


@dataclass
class CameraFrame:
    pose: geo.Pose
    K: geo.Intrinsics = field(default_factory=geo.Intrinsics)
    depth: np.ndarray | None = None
    semantics: np.ndarray | None = None

    def observation(self) -> Observation:
        if self.depth is None or self.semantics is None:
            raise SceneError("frame has not been rendered")
        return Observation(self.depth, self.semantics, self.K, self.pose)


@dataclass
class GlobalScene:
    grid: VoxelGrid
    frames: list
    name: str
    extent: tuple

    @property
    def geometry(self) -> GridGeometry:
        return self.grid.geometry

    @property
    def bounds(self) -> np.ndarray:
        return self.grid.geometry.bounds


@dataclass(frozen=True)
class LocalBox:
    """Axis-aligned local region, stored as an index offset into the global lattice."""

    start: tuple  # global voxel index of the min corner (may be negative)
    global_geometry: GridGeometry
    dims: tuple = LOCAL_DIMS

    @property
    def origin(self) -> np.ndarray:
        g = self.global_geometry
        return np.array(g.origin) + np.array(self.start) * g.voxel_size

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(tuple(self.origin), self.dims, self.global_geometry.voxel_size)

    def index_ranges(self):
        """Global index slices covered by the box, clipped to the global grid."""
        lo = np.maximum(np.array(self.start), 0)
        hi = np.minimum(np.array(self.start) + np.array(self.dims), self.global_geometry.dims)
        return tuple(slice(int(a), int(max(a, b))) for a, b in zip(lo, hi))


def grid_dims(extent, voxel_size: float = VOXEL_SIZE) -> tuple:
    # 5.6 / 0.08 evaluates slightly above 70 in floating point
    return tuple(int(math.ceil(e / voxel_size - 1e-9)) for e in extent)


def gen_synthetic_scene(seed: int, extent=DEFAULT_EXTENT, max_tries: int = 2000) -> GlobalScene:
    """Box room with floor, walls, ceiling and 3-8 non-overlapping objects."""
    extent = tuple(float(e) for e in extent)
    if len(extent) != 3 or extent[0] < 3.0 or extent[1] < 3.0 or extent[2] < 2.5:
        raise SceneError("extent must be at least (3, 3, 2.5) m")
    rng = np.random.default_rng(seed)
    dims = grid_dims(extent)
    labels = np.zeros(dims, dtype=np.uint8)
    labels[0, :, :] = WALL
    labels[-1, :, :] = WALL
    labels[:, 0, :] = WALL
    labels[:, -1, :] = WALL
    labels[:, :, -1] = CEILING
    labels[:, :, 0] = FLOOR

    n_objects = int(rng.integers(3, 9))
    classes = list(OBJECT_SIZES)
    placed = []  # (lo, hi) index boxes in x, y
    tries = 0
    while len(placed) < n_objects:
        tries += 1
        if tries > max_tries:
            raise SceneError("could not place objects without overlap")
        cls = classes[int(rng.integers(len(classes)))]
        (wx, wy, h) = OBJECT_SIZES[cls]
        size = np.array([rng.uniform(*wx), rng.uniform(*wy)])
        if rng.random() < 0.5:
            size = size[::-1]
        nx, ny = (max(1, int(round(s / VOXEL_SIZE))) for s in size)
        nz = max(1, int(round(rng.uniform(*h) / VOXEL_SIZE)))
        if nx > dims[0] - 2 or ny > dims[1] - 2:
            continue
        x0 = int(rng.integers(1, dims[0] - 1 - nx + 1))
        y0 = int(rng.integers(1, dims[1] - 1 - ny + 1))
        lo, hi = (x0, y0), (x0 + nx, y0 + ny)
        if any(lo[0] < p_hi[0] and p_lo[0] < hi[0] and lo[1] < p_hi[1] and p_lo[1] < hi[1] for p_lo, p_hi in placed):
            continue
        placed.append((lo, hi))
        labels[lo[0] : hi[0], lo[1] : hi[1], 0:nz] = cls

    geometry = GridGeometry((0.0, 0.0, 0.0), dims, VOXEL_SIZE)
    return GlobalScene(VoxelGrid(geometry, labels), [], f"synthetic_{seed:03d}", extent)


def _box_start(frame: CameraFrame, g: GridGeometry) -> np.ndarray:
    forward = frame.pose.rotation[:, 2]
    horiz = forward[:2]
    norm = np.linalg.norm(horiz)
    horiz = horiz / norm if norm > 1e-12 else np.zeros(2)
    center = frame.pose.center[:2] + LOCAL_AHEAD * horiz
    half = np.array(LOCAL_DIMS[:2]) * g.voxel_size / 2.0
    return np.round((center - half - np.array(g.origin[:2])) / g.voxel_size).astype(np.int64)


def local_box_for_frame(frame: CameraFrame, scene: GlobalScene | None = None, geometry: GridGeometry | None = None):
    """4.8 x 4.8 x 2.88 m box centered 2.4 m ahead of the camera (horizontally),
    resting on the floor, snapped to the global lattice and clamped into the scene."""
    g = geometry or scene.geometry
    start_xy = _box_start(frame, g)
    upper = np.array(g.dims[:2]) - np.array(LOCAL_DIMS[:2])
    start_xy = np.maximum(np.minimum(start_xy, upper), 0)
    return LocalBox((int(start_xy[0]), int(start_xy[1]), 0), g)


def unclamped_local_box(frame: CameraFrame, geometry: GridGeometry) -> LocalBox:
    """Placement rule without clamping into the scene."""
    start_xy = _box_start(frame, geometry)
    return LocalBox((int(start_xy[0]), int(start_xy[1]), 0), geometry)


def visibility_mask(frame: CameraFrame, box: LocalBox, scene: GlobalScene | None = None, geometry=None) -> np.ndarray:
    """Global boolean mask of voxels whose center lies in ``box`` and in the
    frame's frustum (far plane 4.8 m)."""
    g = geometry or scene.geometry
    mask = np.zeros(g.dims, dtype=bool)
    sx, sy, sz = box.index_ranges()
    if sx.stop <= sx.start or sy.stop <= sy.start or sz.stop <= sz.start:
        return mask
    centers = np.stack(
        np.meshgrid(
            g.axis_centers(0)[sx], g.axis_centers(1)[sy], g.axis_centers(2)[sz], indexing="ij"
        ),
        axis=-1,
    )
    mask[sx, sy, sz] = geo.in_frustum(centers, frame.pose, frame.K, geo.Z_NEAR, geo.Z_FAR)
    return mask


def splice_masks(masks) -> np.ndarray:
    """Union of per-frame masks over the same global grid."""
    masks = list(masks)
    if not masks:
        raise ValueError("no masks to splice")
    shape = masks[0].shape
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        if m.shape != shape:
            raise ValueError(f"mask geometry mismatch: {m.shape} vs {shape}")
        out |= m
    return out


@numba.njit(cache=True)
def _raycast_kernel(labels, origin, vs, R, cam, fx, fy, cx, cy, max_depth, inset, depth, sem):
    dims = np.array(labels.shape, dtype=np.int64)
    hi = origin + dims * vs
    d = np.empty(3)
    idx = np.empty(3, np.int64)
    step = np.empty(3, np.int64)
    t_next = np.empty(3)
    t_delta = np.empty(3)
    height, width = depth.shape
    for row in range(height):
        for col in range(width):
            dcx = (col - cx) / fx
            dcy = (row - cy) / fy
            # world direction scaled so that the ray parameter equals z-depth
            for a in range(3):
                d[a] = R[a, 0] * dcx + R[a, 1] * dcy + R[a, 2]
            t0 = 0.0
            t1 = max_depth
            ok = True
            for a in range(3):
                if d[a] == 0.0:
                    if cam[a] < origin[a] or cam[a] >= hi[a]:
                        ok = False
                else:
                    ta = (origin[a] - cam[a]) / d[a]
                    tb = (hi[a] - cam[a]) / d[a]
                    if ta > tb:
                        ta, tb = tb, ta
                    t0 = max(t0, ta)
                    t1 = min(t1, tb)
            depth[row, col] = 0.0
            sem[row, col] = 0
            if not ok or t0 >= t1:
                continue
            for a in range(3):
                p = cam[a] + t0 * d[a]
                i = int(math.floor((p - origin[a]) / vs))
                idx[a] = min(max(i, 0), dims[a] - 1)
                step[a] = 0
                t_next[a] = math.inf
                t_delta[a] = math.inf
                if d[a] > 0:
                    step[a] = 1
                    t_next[a] = (origin[a] + (idx[a] + 1) * vs - cam[a]) / d[a]
                    t_delta[a] = vs / d[a]
                elif d[a] < 0:
                    step[a] = -1
                    t_next[a] = (origin[a] + idx[a] * vs - cam[a]) / d[a]
                    t_delta[a] = -vs / d[a]
            t_enter = t0
            while t_enter <= max_depth:
                a = 0
                if t_next[1] < t_next[a]:
                    a = 1
                if t_next[2] < t_next[a]:
                    a = 2
                t_exit = min(t_next[a], t1)
                lab = labels[idx[0], idx[1], idx[2]]
                if lab != 0:
                    depth[row, col] = t_enter + min(inset, 0.5 * (t_exit - t_enter))
                    sem[row, col] = lab
                    break
                idx[a] += step[a]
                if idx[a] < 0 or idx[a] >= dims[a]:
                    break
                t_enter = t_next[a]
                t_next[a] += t_delta[a]


def raycast_render(
    scene: GlobalScene, frame: CameraFrame, max_depth: float = RENDER_MAX_DEPTH, inset: float = HIT_INSET
) -> Observation:
    """Per-pixel voxel traversal of the ground-truth grid.

    Depth is the camera z-depth where the ray enters the first non-empty voxel
    (the visible surface), pushed ``inset`` further in (at most half the ray's
    segment in that voxel) so back-projected hits land inside it.
    Pixels without a hit within ``max_depth`` get depth 0 and the empty class.
    """
    K = frame.K
    g = scene.geometry
    depth = np.zeros((K.height, K.width), dtype=np.float64)
    sem = np.zeros((K.height, K.width), dtype=np.uint8)
    _raycast_kernel(
        np.ascontiguousarray(scene.grid.labels),
        np.array(g.origin, dtype=np.float64),
        g.voxel_size,
        np.ascontiguousarray(frame.pose.rotation),
        np.ascontiguousarray(frame.pose.center),
        K.fx,
        K.fy,
        K.cx,
        K.cy,
        float(max_depth),
        float(inset),
        depth,
        sem,
    )
    return Observation(depth.astype(np.float32), sem, K, frame.pose)


def render_scene(scene: GlobalScene) -> GlobalScene:
    """Render every frame of ``scene`` in place and return it."""
    for frame in scene.frames:
        obs = raycast_render(scene, frame)
        frame.depth, frame.semantics = obs.depth, obs.semantics
    return scene


def frame_masks(scene: GlobalScene) -> list:
    return [visibility_mask(f, local_box_for_frame(f, scene), scene) for f in scene.frames]


def gen_trajectory(
    scene: GlobalScene,
    seed: int,
    n_frames: int = DEFAULT_FRAMES,
    K: geo.Intrinsics | None = None,
    min_overlap: float = 0.2,
    min_coverage: float = 0.5,
    max_attempts: int = 64,
) -> list:
    """Orbit-and-look-across camera path inside the room.

    Cameras circle the room center at 1.2-1.6 m height, each looking across
    the room; candidate paths failing the empty-space, consecutive-overlap or
    coverage checks are redrawn.
    """
    K = K or geo.Intrinsics()
    rng = np.random.default_rng([seed, 1])
    g = scene.geometry
    lo, hi = g.bounds
    center = (lo + hi) / 2.0
    span = hi[:2] - lo[:2]
    occupied = scene.grid.labels != EMPTY_CLASS
    for _ in range(max_attempts):
        radius = rng.uniform(0.15, 0.25) * span.min()
        phase = rng.uniform(0, 2 * np.pi)
        direction = 1.0 if rng.random() < 0.5 else -1.0
        frames = []
        for k in range(n_frames):
            angle = phase + direction * 2 * np.pi * k / n_frames
            pos = np.array(
                [
                    center[0] + radius * np.cos(angle),
                    center[1] + radius * np.sin(angle),
                    lo[2] + rng.uniform(1.2, 1.6),
                ]
            )
            yaw = angle + np.pi + rng.uniform(-0.35, 0.35)
            pitch = rng.uniform(0.0, 0.3)
            frames.append(CameraFrame(geo.Pose.look(pos, yaw, pitch), K))
        if not _trajectory_ok(scene, frames, occupied, min_overlap, min_coverage):
            continue
        return frames
    raise SceneError("no valid camera trajectory found")


def _trajectory_ok(scene, frames, occupied, min_overlap, min_coverage) -> bool:
    g = scene.geometry
    for f in frames:
        idx = g.voxel_of(f.pose.center)
        if not g.contains_index(idx) or occupied[tuple(idx)]:
            return False
    masks = [visibility_mask(f, local_box_for_frame(f, scene), scene) for f in frames]
    for prev, cur in zip(masks, masks[1:]):
        if prev.sum() == 0 or (prev & cur).sum() < min_overlap * prev.sum():
            return False
    union = splice_masks(masks)
    return (union & occupied).sum() >= min_coverage * occupied.sum()


def make_scene(seed: int, extent=DEFAULT_EXTENT, n_frames: int = DEFAULT_FRAMES, render: bool = True) -> GlobalScene:
    """Scene, trajectory and (optionally) rendered observations for one seed."""
    scene = gen_synthetic_scene(seed, extent)
    scene.frames = gen_trajectory(scene, seed, n_frames)
    if render:
        render_scene(scene)
    return scene


def knn_label_transfer(
    points, classes, target: GridGeometry, k: int = 1, d_max: float = KNN_MAX_DISTANCE
) -> VoxelGrid:
    """Label voxel centers by majority vote of their ``k`` nearest labeled points.

    Majority ties go to the tied class whose point is nearest; distance ties
    rank the lower point index first.  Voxels farther than ``d_max`` from every
    point stay empty.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    classes = np.asarray(classes, dtype=np.int64).reshape(-1)
    if len(points) == 0:
        raise ValueError("no labeled points")
    if len(points) != len(classes):
        raise ValueError("points and classes differ in length")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(points))
    centers = target.centers().reshape(-1, 3)
    tree = cKDTree(points)
    extra = min(len(points), k + 8)
    dist, idx = tree.query(centers, k=extra)
    dist = dist.reshape(len(centers), extra)
    idx = idx.reshape(len(centers), extra)
    order = np.lexsort((idx, dist), axis=-1)
    dist = np.take_along_axis(dist, order, axis=-1)
    idx = np.take_along_axis(idx, order, axis=-1)
    neigh_idx = idx[:, :k].copy()
    if extra < len(points):
        # a distance tie at rank k may continue past the queried neighbours
        for v in np.flatnonzero(dist[:, -1] == dist[:, k - 1]):
            iv = np.array(tree.query_ball_point(centers[v], dist[v, k - 1] * (1 + 1e-12)))
            dv = np.sqrt(np.sum((points[iv] - centers[v]) ** 2, axis=1))
            neigh_idx[v] = iv[np.lexsort((iv, dv))[:k]]
    neigh = classes[neigh_idx]
    num_classes = int(classes.max()) + 1
    counts = np.zeros((len(centers), num_classes), dtype=np.int64)
    for j in range(k):
        counts[np.arange(len(centers)), neigh[:, j]] += 1
    best = counts.max(axis=1)
    labels = np.full(len(centers), -1, dtype=np.int64)
    for j in range(k):  # nearest first
        cand = neigh[:, j]
        take = (labels < 0) & (counts[np.arange(len(centers)), cand] == best)
        labels[take] = cand[take]
    labels[dist[:, 0] > d_max] = EMPTY_CLASS
    return VoxelGrid(target, labels.astype(np.uint8).reshape(target.dims))
