"""Binary and directory formats.

``GMEM1`` memory snapshot (little-endian)::

    "GMEM" u32 version=1 u32 count f32 bounds[6] f32 interval
    count x (f32 mean[3] scale_raw[3] rotation[4] opacity_raw logits[12], u8 tag)

``OCCG1`` voxel grid (little-endian)::

    "OCCG" u32 version=1 u32 dims[3] f32 voxel_size f32 origin[3]
    X*Y*Z u8 labels, index x + X*(y + Y*z)

Scene directories hold ``scene.json``, ``occ_global.occg`` and per frame
``frame_%03d.json``, ``depth_%03d.f32``, ``sem_%03d.u8`` and ``mask_%03d.bin``
(bit-packed global mask, LSB first).  Floats are stored as f32, so values
survive a round trip exactly once they have been through one save.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import geometry as geo
from .gaussians import NUM_CLASSES, GaussianConfig, GaussianMemory, SemanticGaussians
from .grid import GridGeometry, VoxelGrid

GMEM_MAGIC = b"GMEM"
OCCG_MAGIC = b"OCCG"
VERSION = 1

_GMEM_HEADER = struct.Struct("<4sII6ff")
_OCCG_HEADER = struct.Struct("<4sI3If3f")
_GAUSSIAN_FLOATS = 3 + 3 + 4 + 1 + NUM_CLASSES
_GAUSSIAN_RECORD = np.dtype([("values", "<f4", (_GAUSSIAN_FLOATS,)), ("tag", "u1")])


class FormatError(ValueError):
    """Malformed or unsupported file."""


def _check_header(data: bytes, header: struct.Struct, magic: bytes, kind: str):
    if len(data) < 4 or data[:4] != magic:
        raise FormatError(f"not a {kind} file")
    if len(data) < header.size:
        raise FormatError(f"truncated {'snapshot' if kind == 'GMEM' else 'grid'} header")
    fields = header.unpack_from(data)
    if fields[1] != VERSION:
        raise FormatError(f"unsupported {kind} version {fields[1]}")
    return fields


def memory_to_bytes(memory: GaussianMemory) -> bytes:
    g = memory.gaussians
    n = len(g)
    if g.logits.shape[1] != NUM_CLASSES:
        raise FormatError(f"GMEM1 stores exactly {NUM_CLASSES} logits per Gaussian")
    header = _GMEM_HEADER.pack(GMEM_MAGIC, VERSION, n, *memory.bounds.reshape(-1), memory.interval)
    records = np.zeros(n, dtype=_GAUSSIAN_RECORD)
    records["values"] = np.concatenate(
        [g.mean, g.scale_raw, g.rotation, g.opacity_raw[:, None], g.logits], axis=1
    ).astype("<f4")
    records["tag"] = g.tag
    return header + records.tobytes()


def memory_from_bytes(data: bytes, config: GaussianConfig | None = None) -> GaussianMemory:
    _, _, count, *rest = _check_header(data, _GMEM_HEADER, GMEM_MAGIC, "GMEM")
    bounds, interval = np.array(rest[:6], dtype=np.float64), float(rest[6])
    if not (np.all(np.isfinite(bounds)) and np.isfinite(interval) and interval > 0):
        raise FormatError("bad bounds or interval in snapshot header")
    body = data[_GMEM_HEADER.size :]
    expected = count * _GAUSSIAN_RECORD.itemsize
    if len(body) < expected:
        raise FormatError("truncated snapshot")
    if len(body) > expected:
        raise FormatError("trailing bytes after snapshot")
    records = np.frombuffer(body, dtype=_GAUSSIAN_RECORD, count=count)
    v = records["values"].astype(np.float64)
    gaussians = SemanticGaussians(
        mean=v[:, 0:3],
        scale_raw=v[:, 3:6],
        rotation=v[:, 6:10],
        opacity_raw=v[:, 10],
        logits=v[:, 11:],
        tag=records["tag"].copy(),
    )
    if np.any(gaussians.tag > 1):
        raise FormatError("tag values must be 0 or 1")
    config = config or GaussianConfig()
    return GaussianMemory(gaussians, bounds.reshape(2, 3), interval, config)


def save_memory(memory: GaussianMemory, path) -> None:
    Path(path).write_bytes(memory_to_bytes(memory))


def load_memory(path, config: GaussianConfig | None = None) -> GaussianMemory:
    return memory_from_bytes(Path(path).read_bytes(), config)


def grid_to_bytes(grid: VoxelGrid) -> bytes:
    g = grid.geometry
    header = _OCCG_HEADER.pack(OCCG_MAGIC, VERSION, *g.dims, g.voxel_size, *g.origin)
    return header + grid.flat_labels().tobytes()


def grid_from_bytes(data: bytes) -> VoxelGrid:
    _, _, x, y, z, voxel_size, ox, oy, oz = _check_header(data, _OCCG_HEADER, OCCG_MAGIC, "OCCG")
    if min(x, y, z) == 0 or not (np.isfinite([voxel_size, ox, oy, oz]).all() and voxel_size > 0):
        raise FormatError("bad dims, voxel size or origin in grid header")
    body = data[_OCCG_HEADER.size :]
    n = x * y * z
    if len(body) < n:
        raise FormatError("truncated grid")
    if len(body) > n:
        raise FormatError("trailing bytes after grid")
    labels = np.frombuffer(body, dtype=np.uint8).reshape((x, y, z), order="F").copy()
    if labels.size and labels.max() >= NUM_CLASSES:
        raise FormatError("label out of range")
    return VoxelGrid(GridGeometry((ox, oy, oz), (x, y, z), voxel_size), labels)


def save_grid(grid: VoxelGrid, path) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


def mask_to_bytes(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(order="F"), bitorder="little").tobytes()


def mask_from_bytes(data: bytes, dims) -> np.ndarray:
    n = int(np.prod(dims))
    if len(data) != (n + 7) // 8:
        raise FormatError(f"mask has {len(data)} bytes, expected {(n + 7) // 8}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n, bitorder="little")
    return bits.astype(bool).reshape(tuple(dims), order="F")


def save_mask(mask, path) -> None:
    Path(path).write_bytes(mask_to_bytes(mask))


def load_mask(path, dims) -> np.ndarray:
    return mask_from_bytes(Path(path).read_bytes(), dims)


def _frame_json(frame) -> dict:
    K = frame.K
    return {
        "intrinsics": K.matrix.reshape(-1).tolist(),
        "pose": frame.pose.matrix().reshape(-1).tolist(),
        "width": K.width,
        "height": K.height,
    }


def save_scene(scene, directory, masks=None) -> Path:
    """Write ``scene`` (grid, frames, any rendered observations, masks)."""
    from .dataset import frame_masks

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    save_grid(scene.grid, out / "occ_global.occg")
    if masks is None and scene.frames:
        masks = frame_masks(scene)
    frames = []
    for i, frame in enumerate(scene.frames):
        name = f"frame_{i:03d}.json"
        (out / name).write_text(json.dumps(_frame_json(frame), indent=1))
        entry = {"frame": name, "mask": f"mask_{i:03d}.bin"}
        save_mask(masks[i], out / entry["mask"])
        if frame.depth is not None:
            entry["depth"] = f"depth_{i:03d}.f32"
            entry["semantics"] = f"sem_{i:03d}.u8"
            np.ascontiguousarray(frame.depth, dtype="<f4").tofile(out / entry["depth"])
            np.ascontiguousarray(frame.semantics, dtype=np.uint8).tofile(out / entry["semantics"])
        frames.append(entry)
    manifest = {
        "name": scene.name,
        "extent": list(scene.extent),
        "voxel_size": scene.grid.voxel_size,
        "origin": list(scene.grid.origin),
        "dims": list(scene.grid.dims),
        "frames": frames,
    }
    (out / "scene.json").write_text(json.dumps(manifest, indent=1))
    return out


def _matrix(values, rows, cols) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(rows, cols)


def load_scene(directory, with_masks: bool = False):
    """Read a scene directory; returns the scene, plus masks when requested."""
    from .dataset import CameraFrame, GlobalScene

    d = Path(directory)
    manifest_path = d / "scene.json"
    if not manifest_path.exists():
        raise FormatError(f"{d} has no scene.json")
    manifest = json.loads(manifest_path.read_text())
    grid = load_grid(d / "occ_global.occg")
    exact = GridGeometry(manifest["origin"], manifest["dims"], manifest["voxel_size"])
    if not exact.matches(grid.geometry):
        raise FormatError("scene.json geometry disagrees with occ_global.occg")
    # the manifest keeps full precision; the grid header only has f32
    grid = VoxelGrid(exact, grid.labels)
    frames, masks = [], []
    for entry in manifest["frames"]:
        meta = json.loads((d / entry["frame"]).read_text())
        w, h = int(meta["width"]), int(meta["height"])
        K = geo.Intrinsics.from_matrix(_matrix(meta["intrinsics"], 3, 3), w, h)
        pose = geo.Pose.from_matrix(_matrix(meta["pose"], 3, 4))
        frame = CameraFrame(pose, K)
        if "depth" in entry and (d / entry["depth"]).exists():
            frame.depth = np.fromfile(d / entry["depth"], dtype="<f4").reshape(h, w)
            frame.semantics = np.fromfile(d / entry["semantics"], dtype=np.uint8).reshape(h, w)
        frames.append(frame)
        if with_masks:
            masks.append(load_mask(d / entry["mask"], grid.dims))
    scene = GlobalScene(grid, frames, manifest["name"], tuple(manifest["extent"]))
    return (scene, masks) if with_masks else scene
