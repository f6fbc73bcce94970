import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gaussians
from embocc.formats import (
    FormatError,
    grid_from_bytes,
    grid_to_bytes,
    load_scene,
    mask_from_bytes,
    mask_to_bytes,
    memory_from_bytes,
    memory_to_bytes,
    save_scene,
)
from embocc.gaussians import GaussianConfig, GaussianMemory, init_memory_uniform
from embocc.grid import GridGeometry, VoxelGrid


def small_memory(seed=0, n=50):
    rng = np.random.default_rng(seed)
    g = random_gaussians(rng, n, 0, 3)
    g.tag = rng.integers(0, 2, n).astype(np.uint8)
    return GaussianMemory(g, np.array([[0, 0, 0], [3.2, 3.2, 2.88]]), 0.16, GaussianConfig())


def test_gmem_layout():
    mem = small_memory(n=3)
    data = memory_to_bytes(mem)
    assert data[:4] == b"GMEM"
    assert struct.unpack_from("<II", data, 4) == (1, 3)
    assert len(data) == 4 + 4 + 4 + 24 + 4 + 3 * (23 * 4 + 1)
    # first record starts with mean x as f32
    assert struct.unpack_from("<f", data, 40)[0] == np.float32(mem.gaussians.mean[0, 0])
    assert data[40 + 23 * 4] == mem.gaussians.tag[0]


def test_gmem_roundtrip_byte_exact():
    data = memory_to_bytes(small_memory())
    again = memory_to_bytes(memory_from_bytes(data))
    assert again == data


def test_gmem_roundtrip_values_after_one_save():
    mem = memory_from_bytes(memory_to_bytes(small_memory(1)))
    back = memory_from_bytes(memory_to_bytes(mem))
    assert back.gaussians.equals(mem.gaussians)
    assert np.array_equal(back.bounds, mem.bounds) and back.interval == mem.interval


def test_gmem_empty_memory():
    mem = small_memory(n=0)
    assert len(memory_from_bytes(memory_to_bytes(mem))) == 0


def test_gmem_errors():
    data = memory_to_bytes(small_memory())
    with pytest.raises(FormatError, match="not a GMEM file"):
        memory_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="truncated snapshot"):
        memory_from_bytes(data[:-5])
    with pytest.raises(FormatError, match="version"):
        memory_from_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(FormatError):
        memory_from_bytes(data + b"\0")
    with pytest.raises(FormatError):
        memory_from_bytes(data[:10])
    with pytest.raises(FormatError):
        memory_from_bytes(b"")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=200))
def test_gmem_garbage_never_crashes(blob):
    try:
        memory_from_bytes(b"GMEM" + blob)
    except FormatError:
        pass


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 400), st.integers(0, 255))
def test_gmem_single_byte_corruption_is_structured(pos, value):
    data = bytearray(memory_to_bytes(small_memory(2, 4)))
    pos %= len(data)
    data[pos] = value
    try:
        memory_from_bytes(bytes(data))
    except FormatError:
        pass


def test_occg_layout_and_order():
    geom = GridGeometry((0.0, 0.08, 0.16), (3, 2, 2), 0.08)
    labels = np.arange(12, dtype=np.uint8).reshape(3, 2, 2) % 12
    data = grid_to_bytes(VoxelGrid(geom, labels))
    assert data[:4] == b"OCCG"
    hdr = struct.unpack_from("<4sI3If3f", data)
    assert hdr[1:5] == (1, 3, 2, 2)
    body = data[struct.calcsize("<4sI3If3f") :]
    # index x + X*(y + Y*z)
    for x in range(3):
        for y in range(2):
            for z in range(2):
                assert body[x + 3 * (y + 2 * z)] == labels[x, y, z]


def test_occg_roundtrip_byte_exact(scene0):
    data = grid_to_bytes(scene0.grid)
    assert grid_to_bytes(grid_from_bytes(data)) == data
    assert np.array_equal(grid_from_bytes(data).labels, scene0.grid.labels)


def test_occg_errors():
    data = grid_to_bytes(VoxelGrid.empty(GridGeometry((0, 0, 0), (2, 2, 2), 0.08)))
    with pytest.raises(FormatError, match="not a OCCG file"):
        grid_from_bytes(b"GMEM" + data[4:])
    with pytest.raises(FormatError, match="truncated"):
        grid_from_bytes(data[:-1])
    with pytest.raises(FormatError, match="truncated"):
        grid_from_bytes(data[:12])
    with pytest.raises(FormatError, match="label out of range"):
        grid_from_bytes(data[:-1] + b"\x20")


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=100))
def test_occg_garbage_never_crashes(blob):
    try:
        grid_from_bytes(b"OCCG" + blob)
    except FormatError:
        pass


def test_mask_bit_order():
    mask = np.zeros((3, 2, 2), dtype=bool)
    mask[1, 0, 0] = True  # flat index 1
    mask[0, 0, 1] = True  # flat index 6
    assert mask_to_bytes(mask) == bytes([0b01000010, 0])
    assert np.array_equal(mask_from_bytes(mask_to_bytes(mask), mask.shape), mask)
    with pytest.raises(FormatError):
        mask_from_bytes(b"\0", (3, 2, 2))


def test_scene_directory_roundtrip(scene0, tmp_path):
    save_scene(scene0, tmp_path)
    for name in ("scene.json", "occ_global.occg", "frame_000.json", "depth_000.f32", "sem_000.u8", "mask_029.bin"):
        assert (tmp_path / name).exists()
    back, masks = load_scene(tmp_path, with_masks=True)
    assert back.geometry == scene0.geometry
    assert np.array_equal(back.grid.labels, scene0.grid.labels)
    assert len(back.frames) == 30 and len(masks) == 30
    for a, b in zip(back.frames, scene0.frames):
        assert np.array_equal(a.pose.matrix(), b.pose.matrix())
        assert np.array_equal(a.depth, b.depth) and np.array_equal(a.semantics, b.semantics)
    assert (tmp_path / "depth_000.f32").stat().st_size == 480 * 640 * 4


def test_load_scene_missing_manifest(tmp_path):
    with pytest.raises(FormatError):
        load_scene(tmp_path)


def test_snapshot_stores_f32_rounded_values():
    mem = init_memory_uniform([[0, 0, 0], [3.2, 3.2, 2.88]])
    back = memory_from_bytes(memory_to_bytes(mem))
    assert np.array_equal(back.gaussians.mean, mem.gaussians.mean.astype(np.float32))
    assert np.array_equal(back.gaussians.tag, mem.gaussians.tag)
    assert memory_from_bytes(memory_to_bytes(back)).gaussians.equals(back.gaussians)
