"""Command-line entry point.

Every command logs its fully resolved configuration as one JSON line on
standard error before doing any work, so a run can be repeated from its log.
Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .dataset import DEFAULT_EXTENT, DEFAULT_FRAMES, frame_masks, local_box_for_frame, make_scene, render_scene
from .gaussians import GaussianConfig, activate
from .metrics import lookback_eval, score
from .pipeline import RunConfig, run_local, run_sequence, sequence_runner, snapshot
from .refinement import ConfidenceSchedule

log = logging.getLogger("embocc")


class UsageError(Exception):
    pass


def _floats(text: str, n: int | None = None) -> list:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(values) != n:
        raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
    return values


def _extent(text: str) -> tuple:
    return tuple(_floats(text, 3))


def _ints(text: str) -> list:
    """``"0,1,2"`` or ranges like ``"0-29"``; mixed forms allowed."""
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers like 0,1,2 or 0-29, got {text!r}") from None
    return out


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--interval", type=float, default=0.16, help="memory lattice spacing in m (default 0.16)")
    p.add_argument("--theta", type=_floats, default=[0.0, 0.0, 0.5], help="tagged confidence per stage (default 0,0,0.5)")
    p.add_argument("--local-count", type=int, default=16200, help="Gaussians per local prediction (default 16200)")
    p.add_argument("--s-max", type=float, default=0.08, help="maximum Gaussian scale in m (default 0.08)")
    p.add_argument("--cutoff-sigmas", type=float, default=3.0, help="splat cutoff radius in sigmas; inf disables")
    p.add_argument("--tagged-only", action="store_true", help="splat only tagged Gaussians in the global read-out")


def _run_config(args, frames=None) -> RunConfig:
    theta = list(args.theta)
    gaussian = GaussianConfig(s_max=args.s_max, interval=args.interval, local_count=args.local_count)
    schedule = ConfidenceSchedule(theta_tagged=theta, theta_untagged=[0.0] * len(theta))
    return RunConfig(
        gaussian=gaussian,
        schedule=schedule,
        cutoff_sigmas=args.cutoff_sigmas,
        frames=frames,
        splat_tagged_only=args.tagged_only,
    )


def _echo(command: str, **config) -> None:
    log.info("config %s", json.dumps({"command": command, **config}, sort_keys=True, default=str))


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _gen_one(task):
    seed, extent, n_frames, out = task
    scene = make_scene(seed, extent, n_frames)
    formats.save_scene(scene, out)
    return seed, str(out), len(scene.frames), int((scene.grid.labels > 0).sum())


def cmd_gen_scene(args) -> int:
    seeds = args.seed
    _echo("gen-scene", seeds=seeds, extent=args.extent, frames=args.frames, out=args.out, jobs=args.jobs)
    out = Path(args.out)
    if len(seeds) == 1:
        tasks = [(seeds[0], args.extent, args.frames, out)]
    else:
        tasks = [(s, args.extent, args.frames, out / f"seed_{s:04d}") for s in seeds]
    if args.jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_gen_one, tasks))
    else:
        results = [_gen_one(t) for t in tasks]
    for seed, path, n, occupied in results:
        _emit({"seed": seed, "scene": path, "frames": n, "occupied_voxels": occupied})
    return 0


def cmd_render(args) -> int:
    _echo("render", scene=args.scene)
    scene = formats.load_scene(args.scene)
    render_scene(scene)
    formats.save_scene(scene, args.scene, frame_masks(scene))
    _emit({"scene": args.scene, "rendered_frames": len(scene.frames)})
    return 0


def _require_rendered(scene, indices) -> None:
    missing = [i for i in indices if scene.frames[i].depth is None]
    if missing:
        raise RuntimeError(f"frames {missing} have no rendered observation; run `render` first")


def cmd_run_local(args) -> int:
    cfg = _run_config(args)
    _echo("run-local", scene=args.scene, frame=args.frame, out=args.out, run=cfg.to_dict())
    scene = formats.load_scene(args.scene)
    if not 0 <= args.frame < len(scene.frames):
        raise UsageError(f"--frame {args.frame} out of range (scene has {len(scene.frames)} frames)")
    _require_rendered(scene, [args.frame])
    from .dataset import visibility_mask
    from .pipeline import local_ground_truth, local_mask

    frame = scene.frames[args.frame]
    box = local_box_for_frame(frame, scene)
    pred = run_local(frame, frame.observation(), cfg, box)
    formats.save_grid(pred, args.out)
    report = score(pred, local_ground_truth(scene, box), local_mask(visibility_mask(frame, box, scene), box))
    _emit({"frame": args.frame, "box_start": list(map(int, box.start)), "out": args.out, **report.to_dict()})
    return 0


def _embodied_one(task):
    scene_dir, out, cfg, dump_steps = task
    scene = formats.load_scene(scene_dir)
    frames = cfg.frame_list(len(scene.frames))
    _require_rendered(scene, frames)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []

    def on_step(step, frame_index, grid, report, state):
        line = {"step": step, "frame": frame_index, **report.to_dict()}
        lines.append(line)
        if dump_steps:
            formats.save_grid(grid, out / f"occ_step_{step:03d}.occg")
            snapshot(state.memory, out / f"memory_step_{step:03d}.gmem")

    result = run_sequence(scene, cfg, on_step)
    formats.save_grid(result.grid, out / "occ_final.occg")
    snapshot(result.state.memory, out / "memory.gmem")
    formats.save_mask(result.state.explored_mask, out / "explored_mask.bin")
    (out / "scores.jsonl").write_text("".join(json.dumps(l, sort_keys=True) + "\n" for l in lines))
    return str(scene_dir), str(out), lines


def cmd_run_embodied(args) -> int:
    frames = args.frames if args.frames is not None else list(range(DEFAULT_FRAMES))
    cfg = _run_config(args, frames)
    _echo("run-embodied", scene=args.scene, out=args.out, jobs=args.jobs, dump_steps=args.dump_steps, run=cfg.to_dict())
    out = Path(args.out)
    if len(args.scene) == 1:
        tasks = [(args.scene[0], out, cfg, args.dump_steps)]
    else:
        tasks = [(s, out / Path(s).name, cfg, args.dump_steps) for s in args.scene]
    if args.jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_embodied_one, tasks))
    else:
        results = [_embodied_one(t) for t in tasks]
    for scene_dir, out_dir, lines in results:
        for line in lines:
            _emit({"scene": scene_dir, **line})
        _emit({"scene": scene_dir, "out": out_dir, "final": lines[-1] if lines else None})
    return 0


def cmd_lookback(args) -> int:
    cfg = _run_config(args)
    _echo("lookback", scene=args.scene, k=args.k, run=cfg.to_dict())
    scene, masks = formats.load_scene(args.scene, with_masks=True)
    if not 1 <= args.k <= len(scene.frames):
        raise UsageError(f"--k must be in 1..{len(scene.frames)}")
    _require_rendered(scene, range(args.k))
    res = lookback_eval(sequence_runner(cfg), scene, args.k, masks)
    _emit({"protocol": "first_time", "frames": res.first_frames, **res.first_time.to_dict()})
    _emit({"protocol": "look_back", "frames": res.lookback_frames, **res.look_back.to_dict()})
    return 0


def cmd_eval(args) -> int:
    _echo("eval", pred=args.pred, gt=args.gt, mask=args.mask)
    pred = formats.load_grid(args.pred)
    gt = formats.load_grid(args.gt)
    mask = formats.load_mask(args.mask, gt.dims) if args.mask else None
    _emit(score(pred, gt, mask).to_dict())
    return 0


def ply_text(memory, config: GaussianConfig | None = None) -> str:
    """ASCII PLY with one vertex per Gaussian: position, scales, opacity, class, tag."""
    g = memory.gaussians
    scale, opacity, probs = activate(g, config or memory.config)
    cls = np.argmax(probs, axis=-1) if len(g) else np.zeros(0, dtype=int)
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(g)}",
        "property float x",
        "property float y",
        "property float z",
        "property float scale_x",
        "property float scale_y",
        "property float scale_z",
        "property float opacity",
        "property uchar class",
        "property uchar tag",
        "end_header",
    ]
    rows = [
        f"{m[0]:.6g} {m[1]:.6g} {m[2]:.6g} {s[0]:.6g} {s[1]:.6g} {s[2]:.6g} {o:.6g} {c} {t}"
        for m, s, o, c, t in zip(g.mean, scale, opacity, cls, g.tag)
    ]
    return "\n".join(header + rows) + "\n"


def cmd_export_ply(args) -> int:
    _echo("export-ply", gmem=args.gmem, out=args.out)
    memory = formats.load_memory(args.gmem)
    Path(args.out).write_text(ply_text(memory))
    _emit({"gmem": args.gmem, "out": args.out, "vertices": len(memory.gaussians)})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embocc", description="Embodied semantic occupancy with Gaussian memory.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-scene", help="generate a synthetic scene with trajectory and renders")
    p.add_argument("--seed", type=_ints, default=[0], help="seed, or list/range of seeds")
    p.add_argument("--extent", type=_extent, default=DEFAULT_EXTENT, help="room size X,Y,Z in m")
    p.add_argument("--frames", type=int, default=DEFAULT_FRAMES)
    p.add_argument("--out", required=True, help="scene directory (parent directory for several seeds)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("render", help="(re)render depth and semantics for a scene directory")
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("run-local", help="single-frame local prediction")
    p.add_argument("--scene", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True, help="output OCCG1 grid")
    _add_run_flags(p)
    p.set_defaults(func=cmd_run_local)

    p = sub.add_parser("run-embodied", help="online embodied prediction over a frame list")
    p.add_argument("--scene", required=True, nargs="+")
    p.add_argument("--frames", type=_ints, default=None, help="frame indices (default 0-29)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-steps", action="store_true", help="write the grid and memory after every step")
    p.add_argument("--jobs", type=int, default=1)
    _add_run_flags(p)
    p.set_defaults(func=cmd_run_embodied)

    p = sub.add_parser("lookback", help="first-time vs look-back comparison over frames [0..k)")
    p.add_argument("--scene", required=True)
    p.add_argument("--k", type=int, required=True)
    _add_run_flags(p)
    p.set_defaults(func=cmd_lookback)

    p = sub.add_parser("eval", help="score a predicted grid against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", default=None, help="bit-packed mask over the ground-truth grid")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-ply", help="write memory Gaussians as an ASCII PLY point file")
    p.add_argument("--gmem", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "jobs", 1) < 1:
        parser.print_usage(sys.stderr)
        print("embocc: error: --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"embocc: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures become exit code 1
        log.debug("traceback", exc_info=True)
        print(f"embocc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
