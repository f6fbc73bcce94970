
import numpy as np
import pytest

from embocc import geometry as geo
from embocc.dataset import CameraFrame, frame_masks, local_box_for_frame, splice_masks
from embocc.formats import FormatError
from embocc.gaussians import GaussianConfig, select_frustum
from embocc.pipeline import (
    EmbodiedState,
    RunConfig,
    global_readout,
    local_gaussians,
    local_lattice_counts,
    restore,
    run_embodied_step,
    run_local,
    run_seeds,
    run_sequence,
    snapshot,
)
from embocc.splatting import labels_from_volume, splat
from embocc.refinement import ConfidenceSchedule, Observation, refine_frustum

def test_run_local_shape_and_count(scene0):
    frame = scene0.frames[0]
    box = local_box_for_frame(frame, scene0)
    cfg = RunConfig()
    assert tuple(local_lattice_counts(box, 16200)) == (30, 30, 18)
    g = local_gaussians(frame, box, cfg)
    assert len(g) == 16200
    # fresh Gaussians sit at lattice centers of the box, expressed in camera frame
    world = geo.camera_to_world(g.mean, frame.pose)
    lo, hi = box.geometry.bounds
    assert np.all(world > lo) and np.all(world < hi)
    grid = run_local(frame, frame.observation(), cfg, box)
    assert grid.dims == (60, 60, 36)
    assert grid.geometry.matches(box.geometry)

def test_run_local_needs_box(scene0):
    frame = scene0.frames[0]
    with pytest.raises(ValueError):
        run_local(frame, frame.observation(), RunConfig())

def test_first_step_equals_untagged_refinement(scene0):
    cfg = RunConfig()
    frame = scene0.frames[0]
    state = EmbodiedState.for_scene(scene0, cfg)
    idx, view = select_frustum(state.memory, frame.pose, frame.K)
    expected = refine_frustum(view, np.zeros(len(view)), frame.observation(), ConfidenceSchedule.constant(0.0))
    run_embodied_step(state, frame, frame.observation(), cfg, scene0)
    got = state.memory.gaussians.take(idx)
    assert np.array_equal(got.logits, expected.logits)
    assert np.array_equal(got.opacity_raw, expected.opacity_raw)
    bounds = state.memory.bounds
    world = np.clip(geo.camera_to_world(expected.mean, frame.pose), bounds[0], bounds[1])
    assert np.allclose(got.mean, world, atol=1e-12)
    assert np.all(got.tag == 1)
    assert len(state.processed_masks) == 1 and state.frame_cursor == 1

def test_step_without_visible_gaussians_leaves_memory(scene0):
    cfg = RunConfig()
    state = EmbodiedState.for_scene(scene0, cfg)
    before = state.memory.gaussians.copy()
    # camera outside the room looking away from it
    frame = CameraFrame(geo.Pose.look([-1.0, 2.8, 1.4], yaw=np.pi))
    obs = Observation(np.zeros((480, 640)), np.zeros((480, 640)), frame.K, frame.pose)
    run_embodied_step(state, frame, obs, cfg, scene0)
    assert state.memory.gaussians.equals(before)

def test_repeated_step_moves_less(scene0):
    cfg = RunConfig()
    frame = scene0.frames[3]
    obs = frame.observation()
    state = EmbodiedState.for_scene(scene0, cfg)
    m0 = state.memory.gaussians.mean.copy()
    run_embodied_step(state, frame, obs, cfg, scene0)
    m1 = state.memory.gaussians.mean.copy()
    run_embodied_step(state, frame, obs, cfg, scene0)
    m2 = state.memory.gaussians.mean
    first = np.linalg.norm(m1 - m0, axis=1)
    second = np.linalg.norm(m2 - m1, axis=1)
    assert np.all(second <= first + 1e-9)

@pytest.fixture(scope="module")
def short_run(scene0):
    return run_sequence(scene0, RunConfig(frames=list(range(6))))

def test_sequence_masks_and_reports(scene0, short_run):
    assert short_run.frames == list(range(6))
    assert len(short_run.reports) == 6 and len(short_run.state.processed_masks) == 6
    masks = frame_masks(scene0)
    assert np.array_equal(short_run.state.explored_mask, splice_masks(masks[:6]))
    for m, ref in zip(short_run.state.processed_masks, masks):
        assert np.array_equal(m, ref)
    assert short_run.reports[-1].voxel_count == splice_masks(masks[:6]).sum()

def test_sequence_conserves_count(scene0, short_run):
    fresh = EmbodiedState.for_scene(scene0, RunConfig())
    assert len(short_run.state.memory) == len(fresh.memory)

def test_sequence_deterministic(scene0, short_run):
    again = run_sequence(scene0, RunConfig(frames=list(range(6))))
    assert np.array_equal(again.grid.labels, short_run.grid.labels)
    assert again.state.memory.gaussians.equals(short_run.state.memory.gaussians)

def test_default_frames_are_first_thirty():
    assert RunConfig().frame_list(40) == list(range(30))
    with pytest.raises(ValueError):
        RunConfig(frames=[0, 31]).frame_list(30)

def test_tagged_only_readout(scene0, short_run):
    mem = short_run.state.memory
    cfg = RunConfig(splat_tagged_only=True)
    a = global_readout(mem, scene0.geometry, cfg)
    tagged = mem.gaussians.take(np.flatnonzero(mem.gaussians.tag))
    ref = labels_from_volume(splat(tagged, scene0.geometry))
    assert np.array_equal(a.labels, ref.labels)
    assert 0 < len(tagged) < len(mem)

def test_config_dict_roundtrip():
    cfg = RunConfig(gaussian=GaussianConfig(interval=0.2), frames=[1, 2])
    assert RunConfig.from_dict(cfg.to_dict()) == cfg

def test_snapshot_restore(tmp_path, short_run):
    path = tmp_path / "m.gmem"
    snapshot(short_run.state.memory, path)
    loaded = restore(path)
    snapshot(loaded, tmp_path / "again.gmem")
    assert (tmp_path / "again.gmem").read_bytes() == path.read_bytes()
    assert np.array_equal(loaded.gaussians.tag, short_run.state.memory.gaussians.tag)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated snapshot"):
        restore(path)
    path.write_bytes(b"NOPE" + b"\0" * 64)
    with pytest.raises(FormatError, match="not a GMEM file"):
        restore(path)

def test_run_seeds_independent_of_jobs():
    cfg = RunConfig(frames=[0, 1, 2])
    one = run_seeds([4, 5], cfg, jobs=1, extent=(3.2, 3.2, 2.88))
    two = run_seeds([4, 5], cfg, jobs=2, extent=(3.2, 3.2, 2.88))
    for s in (4, 5):
        assert np.array_equal(one[s][0].labels, two[s][0].labels)
        assert [r.miou for r in one[s][1]] == [r.miou for r in two[s][1]]
