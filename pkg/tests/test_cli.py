import json

import numpy as np
import pytest

from embocc.cli import main, ply_text
from embocc.formats import load_grid, load_memory, save_grid, save_mask, save_scene


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory, scene0):
    d = tmp_path_factory.mktemp("scene")
    save_scene(scene0, d)
    return d


def lines(capsys):
    out = capsys.readouterr().out
    return [json.loads(l) for l in out.splitlines() if l.strip()]


def test_no_command_is_usage_error(capsys):
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_rejected(capsys):
    assert main(["eval", "--pred", "a", "--gt", "b", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_list_value_is_usage_error(capsys):
    assert main(["gen-scene", "--out", "x", "--extent", "1,2"]) == 2


def test_runtime_error_exit_code(tmp_path, capsys):
    assert main(["eval", "--pred", str(tmp_path / "nope"), "--gt", str(tmp_path / "nope")]) == 1
    assert "error" in capsys.readouterr().err


def test_eval_identical_is_one(tmp_path, scene0, capsys):
    save_grid(scene0.grid, tmp_path / "gt.occg")
    save_mask(np.ones(scene0.grid.dims, bool), tmp_path / "m.bin")
    args = ["eval", "--pred", str(tmp_path / "gt.occg"), "--gt", str(tmp_path / "gt.occg")]
    assert main(args + ["--mask", str(tmp_path / "m.bin")]) == 0
    report = lines(capsys)[-1]
    assert report["iou"] == 1.0 and report["miou"] == 1.0


def test_config_echo_on_start(tmp_path, scene0, caplog):
    save_grid(scene0.grid, tmp_path / "gt.occg")
    with caplog.at_level("INFO", logger="embocc"):
        main(["eval", "--pred", str(tmp_path / "gt.occg"), "--gt", str(tmp_path / "gt.occg")])
    echo = [r.getMessage() for r in caplog.records if r.getMessage().startswith("config ")]
    assert echo and json.loads(echo[0][len("config ") :])["command"] == "eval"


def test_gen_scene_then_run_embodied(tmp_path, capsys, caplog):
    scene = tmp_path / "s"
    assert main(["gen-scene", "--seed", "2", "--extent", "3.2,3.2,2.88", "--out", str(scene)]) == 0
    assert (scene / "scene.json").exists() and (scene / "depth_003.f32").exists()
    out = tmp_path / "run"
    with caplog.at_level("INFO", logger="embocc"):
        code = main(["run-embodied", "--scene", str(scene), "--frames", "0-3", "--out", str(out), "--dump-steps"])
    assert code == 0
    echo = next(r.getMessage() for r in caplog.records if r.getMessage().startswith("config "))
    cfg = json.loads(echo[len("config ") :])
    assert cfg["run"]["gaussian"]["interval"] == 0.16
    assert cfg["run"]["schedule"]["theta_tagged"] == [0.0, 0.0, 0.5]
    assert cfg["run"]["frames"] == [0, 1, 2, 3]
    steps = [l for l in lines(capsys) if "step" in l]
    assert [s["step"] for s in steps] == [0, 1, 2, 3]
    assert (out / "occ_final.occg").exists() and (out / "occ_step_003.occg").exists()
    mem = load_memory(out / "memory.gmem")
    assert mem.gaussians.tag.any()
    grid = load_grid(out / "occ_final.occg")
    assert grid.dims == (40, 40, 36)

    ply = tmp_path / "m.ply"
    assert main(["export-ply", "--gmem", str(out / "memory.gmem"), "--out", str(ply)]) == 0
    text = ply.read_text().splitlines()
    assert text[0] == "ply" and f"element vertex {len(mem.gaussians)}" in text
    assert len(text) == text.index("end_header") + 1 + len(mem.gaussians)


def test_render_command(tmp_path, capsys):
    scene = tmp_path / "s"
    assert main(["gen-scene", "--seed", "3", "--extent", "3.2,3.2,2.88", "--out", str(scene)]) == 0
    before = (scene / "depth_000.f32").read_bytes()
    (scene / "depth_000.f32").unlink()
    assert main(["render", "--scene", str(scene)]) == 0
    assert (scene / "depth_000.f32").read_bytes() == before


def test_run_local(scene_dir, tmp_path, capsys):
    out = tmp_path / "local.occg"
    assert main(["run-local", "--scene", str(scene_dir), "--frame", "0", "--out", str(out)]) == 0
    assert load_grid(out).dims == (60, 60, 36)
    report = lines(capsys)[-1]
    assert 0.0 <= report["iou"] <= 1.0
    assert main(["run-local", "--scene", str(scene_dir), "--frame", "99", "--out", str(out)]) == 2


def test_lookback_prints_both_reports(scene_dir, capsys):
    assert main(["lookback", "--scene", str(scene_dir), "--k", "3"]) == 0
    first, back = lines(capsys)[-2:]
    assert first["protocol"] == "first_time" and first["frames"] == [0, 1, 2]
    assert back["protocol"] == "look_back" and back["frames"] == [0, 1, 2, 0, 1, 2]
    assert first["voxels"] == back["voxels"]


def test_gen_scene_several_seeds_with_jobs(tmp_path, capsys):
    args = ["gen-scene", "--seed", "0,1", "--extent", "3.2,3.2,2.88", "--jobs", "2"]
    assert main(args + ["--out", str(tmp_path)]) == 0
    assert (tmp_path / "seed_0000" / "scene.json").exists() and (tmp_path / "seed_0001" / "scene.json").exists()


def test_ply_text_header_only_for_empty():
    from embocc.gaussians import GaussianMemory, SemanticGaussians

    mem = GaussianMemory(SemanticGaussians.empty(), np.zeros((2, 3)), 0.16)
    assert ply_text(mem).splitlines()[2] == "element vertex 0"
