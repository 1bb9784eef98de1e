"""Command-line entry point: ``rayblend <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _Progress:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __call__(self, record: dict):
        if self.enabled:
            print(json.dumps(record), flush=True)


# config keys that can also be given as flags; flags win over the config file
_FIT_FLAGS = {
    "iterations": int, "learning_rate": float, "head_learning_rate": float, "optimizer": str,
    "beta": float, "loss_rgb": str, "crop_size": int, "zoom_min": float, "zoom_max": float,
    "use_jitter": str, "jitter_prob": float, "use_overlay": str, "max_ray_len": int,
    "pyramid_levels": int, "head_mode": str, "fusion_threshold": float, "holdout": str,
    "val_every": int, "background": str,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: all cores)")
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--progress", action="store_true",
                        help="emit JSON-lines progress records on stdout")

    parser = _Parser(prog="rayblend", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("fit", parents=[common], help="fit descriptors to a dataset")
    p.add_argument("--scene", action="append", required=True,
                   help="scene dir, scene.json or .ply (twice for overlay fitting)")
    p.add_argument("--data", action="append", required=True,
                   help="dataset dir with cameras.txt and <view>.png (one per scene)")
    p.add_argument("--config", required=True, help="fit config (key = value lines)")
    p.add_argument("--out", required=True, help="output directory")
    for key, kind in _FIT_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=kind, default=None)

    render_flags = argparse.ArgumentParser(add_help=False)
    render_flags.add_argument("--cameras", required=True, help="cameras file")
    render_flags.add_argument("--out", required=True, help="output directory")
    render_flags.add_argument("--ray-len", type=int, default=50)
    render_flags.add_argument("--levels", type=int, default=4)
    render_flags.add_argument("--background", default=None, help="PNG to blend onto")
    render_flags.add_argument("--alpha-scale", type=float, default=None,
                              help="rescale activated alphas by p**mu")
    render_flags.add_argument("--head", default=None, help="head.json from a fit")
    render_flags.add_argument("--force-opaque", action="store_true",
                              help="debug: treat every point as opaque (hard z-buffer)")
    render_flags.add_argument("--save-raw", action="store_true",
                              help="also write the raw pyramid of each view as .npz")

    p = sub.add_parser("render", parents=[common, render_flags], help="render views")
    p.add_argument("--scene", required=True, help="scene dir, scene.json, .ply or manifest")

    p = sub.add_parser("compose", parents=[common, render_flags],
                       help="compose scenes from a manifest and render them")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--configs", type=int, default=200)
    p.add_argument("--max-points", type=int, default=20)
    p.add_argument("--max-canvas", type=int, default=16)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--tamper", type=float, default=0.0, help=argparse.SUPPRESS)

    p = sub.add_parser("bench", parents=[common], help="time the forward pass")
    p.add_argument("--points", type=int, default=400_000)
    p.add_argument("--canvas", type=int, nargs="+", default=[512, 512])
    p.add_argument("--ray-len", type=int, default=50)
    p.add_argument("--levels", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--json", action="store_true", help="print the result as JSON")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic example dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=int, default=500)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--canvas", type=int, default=64)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--ray-len", type=int, default=50)
    return parser


# ---------------------------------------------------------------- helpers

def _set_threads(n):
    import numba
    if n is not None:
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _load_any_scene(path: str, seed: int):
    from .io import compose_scenes, load_scene
    p = Path(path)
    if p.suffix == ".json" and p.is_file():
        meta = json.loads(p.read_text())
        if meta.get("format") == "rayblend-manifest":
            return compose_scenes(p)
    return load_scene(p, seed=seed)


def load_dataset(directory, background: str = ""):
    from .io import load_cameras, load_image
    from .scene import FitDataset, TargetKind
    directory = Path(directory)
    cams = load_cameras(directory / "cameras.txt")
    views = []
    for cam in cams:
        views.append((cam, load_image(directory / f"{cam.name}.png")))
    kinds = {img.shape[-1] for _, img in views}
    if len(kinds) != 1:
        raise ValueError(f"{directory}: mixed RGB and RGBA targets")
    kind = TargetKind.RGBA if kinds == {4} else TargetKind.RGB
    bg = None
    bg_path = Path(background) if background else directory / "background.png"
    if bg_path.exists():
        bg = load_image(bg_path)[..., :3]
    return FitDataset(views, kind, [c.name for c in cams]), bg


def _render_views(scene, args, out: Path, progress):
    from .fitter import render_image
    from .head import HeadConfig
    from .io import load_cameras, load_image, save_image
    cams = load_cameras(args.cameras)
    head = HeadConfig()
    if args.head:
        head = HeadConfig.from_dict(json.loads(Path(args.head).read_text()))
    background = load_image(args.background)[..., :3] if args.background else None
    out.mkdir(parents=True, exist_ok=True)
    p = 1.0 if args.alpha_scale is None else args.alpha_scale
    for k, cam in enumerate(cams):
        name = cam.name or f"{k:04d}"
        rgba, fwd, _ = render_image(scene, cam, head, args.levels, args.ray_len,
                                    alpha_scale=p, force_opaque=args.force_opaque)
        image = rgba
        if background is not None:
            if background.shape[:2] != rgba.shape[:2]:
                raise ValueError(f"background {background.shape[:2]} does not match view "
                                 f"{name} canvas {rgba.shape[:2]}")
            image = (1.0 - rgba[..., 3:]) * background + rgba[..., :3]
        save_image(out / f"{name}.png", image)
        if args.save_raw:
            arrays = {}
            for t, img in enumerate(fwd.images):
                h, w = -(-cam.height // 2 ** t), -(-cam.width // 2 ** t)
                arrays[f"features{t}"] = img.features[:h, :w]
                arrays[f"alpha{t}"] = img.alpha[:h, :w]
            np.savez(out / f"{name}_raw.npz", **arrays)
        progress({"event": "view", "id": name})
    return len(cams)


# ---------------------------------------------------------------- commands

def cmd_fit(args, progress) -> int:
    from .fitter import FitConfig, FitDivergence, fit, fit_pair_with_overlay, render_image
    from .io import save_image, save_scene
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise UsageError(f"config file {cfg_path} not found")
    overrides = {k: getattr(args, k) for k in _FIT_FLAGS}
    for k in ("use_jitter", "use_overlay"):
        if overrides[k] is not None:
            overrides[k] = overrides[k].lower() in ("1", "true", "yes")
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = FitConfig.from_text(cfg_path.read_text(), **overrides)
    if cfg.background and not Path(cfg.background).is_absolute():
        cfg.background = str(cfg_path.parent / cfg.background)
    if len(args.scene) != len(args.data) or len(args.scene) > 2:
        raise UsageError("give one --data per --scene (at most two)")
    if len(args.scene) == 2 and not cfg.use_overlay:
        raise UsageError("two scenes need use_overlay = true")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = [_load_any_scene(s, cfg.seed + k) for k, s in enumerate(args.scene)]
    loaded = [load_dataset(d, cfg.background) for d in args.data]

    holdout = set(cfg.holdout_ids)
    splits = []
    for data, _ in loaded:
        train_idx = [k for k, v in enumerate(data.view_ids) if v not in holdout]
        held_idx = [k for k, v in enumerate(data.view_ids) if v in holdout]
        if not train_idx:
            raise ValueError("every view is held out")
        splits.append((data.subset(train_idx), data.subset(held_idx) if held_idx else None))

    def on_validation(it, scene, head):
        val_dir = out / "val"
        val_dir.mkdir(exist_ok=True)
        for cam, _ in splits[0][1].views:
            rgba = render_image(scene, cam, head, cfg.pyramid_levels, cfg.max_ray_len)[0]
            save_image(val_dir / f"{it:06d}_{cam.name}.png", rgba)
        progress({"event": "validation", "iteration": it})

    try:
        if len(scenes) == 2:
            a, b, report = fit_pair_with_overlay(scenes[0], scenes[1], splits[0][0],
                                                 splits[1][0], cfg, progress=progress)
            fitted = [a, b]
        else:
            validation = (splits[0][1], on_validation) if splits[0][1] is not None else None
            scene, report = fit(scenes[0], splits[0][0], cfg, background=loaded[0][1],
                                progress=progress, validation=validation)
            fitted = [scene]
    except FitDivergence as exc:
        (out / "report.json").write_text(exc.report.to_json())
        raise
    names = ["scene"] if len(fitted) == 1 else ["scene_a", "scene_b"]
    for name, scene in zip(names, fitted):
        save_scene(scene, out / name)
    (out / "head.json").write_text(json.dumps(report.head.to_dict(), indent=2) + "\n")
    (out / "report.json").write_text(report.to_json())
    (out / "config.txt").write_text(cfg.to_text())
    final = report.losses[-1] if report.losses else None
    progress({"event": "done", "iterations": len(report.losses), "loss": final})
    if not progress.enabled:
        print(f"fit: {len(report.losses)} iterations, final loss {final}, output in {out}")
    return EXIT_OK


def cmd_render(args, progress) -> int:
    scene = _load_any_scene(args.scene, args.seed or 0)
    n = _render_views(scene, args, Path(args.out), progress)
    if not progress.enabled:
        print(f"render: {n} views written to {args.out}")
    return EXIT_OK


def cmd_compose(args, progress) -> int:
    from .io import compose_scenes
    scene = compose_scenes(args.manifest)
    n = _render_views(scene, args, Path(args.out), progress)
    if not progress.enabled:
        print(f"compose: {len(scene)} points, {n} views written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args, progress) -> int:
    from .gradcheck import REL_TOL, run_gradcheck
    report = run_gradcheck(args.seed or 0, args.configs, args.max_points, args.max_canvas,
                           args.max_len, tamper=args.tamper)
    summary = {"event": "gradcheck", "max_rel_error": report.max_rel_error,
               "configs": report.configs, "entries": report.entries,
               "kinds": report.kinds, "coverage": report.coverage, "passed": report.passed}
    if progress.enabled:
        progress(summary)
    else:
        status = "PASS" if report.passed else "FAIL"
        print(f"gradcheck {status}: max relative error {report.max_rel_error:.3e} "
              f"(tolerance {REL_TOL:g}) over {report.configs} configs, "
              f"{report.entries} partials; worst {report.worst}")
        print("  coverage: " + ", ".join(f"{k} {v}" for k, v in report.coverage.items()))
    if not report.passed:
        print(f"error [gradcheck]: max relative error {report.max_rel_error:.3e} "
              f">= {REL_TOL:g}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args, progress) -> int:
    from .bench import run_bench
    canvas = tuple(args.canvas * 2 if len(args.canvas) == 1 else args.canvas[:2])
    result = run_bench(args.points, canvas, args.ray_len, args.repeats, args.levels,
                       args.seed or 0)
    if args.json:
        print(json.dumps(result))
    else:
        ms = result["median_ms"]
        print(f"bench: {args.points} points, {canvas[0]}x{canvas[1]}, L={args.ray_len}, "
              f"T={args.levels}, {result['threads']} threads, median of {args.repeats}")
        for phase, value in ms.items():
            print(f"  {phase:8s} {value:9.2f} ms")
    return EXIT_OK


def cmd_synth(args, progress) -> int:
    from .fitter import FitConfig
    from .io import save_cameras, save_image, save_point_cloud
    from .synthetic import orbit_cameras, render_dataset, two_layer_scene
    rng = np.random.default_rng(args.seed or 0)
    out = Path(args.out)
    (out / "data").mkdir(parents=True, exist_ok=True)
    scene = two_layer_scene(args.points, rng=rng)
    named = orbit_cameras(args.views, (args.canvas, args.canvas), rng=rng)
    data = render_dataset(scene, named, args.levels, args.ray_len)
    save_cameras(named, out / "data" / "cameras.txt")
    for cam, (_, img) in zip(named, data.views):
        save_image(out / "data" / f"{cam.name}.png", img)
    save_point_cloud(scene.cloud, out / "points.ply")
    cfg = FitConfig(iterations=200, pyramid_levels=args.levels, max_ray_len=args.ray_len,
                    seed=args.seed or 0)
    (out / "fit.cfg").write_text(cfg.to_text())
    if not progress.enabled:
        print(f"synth: {args.points} points, {args.views} views written to {out}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "render": cmd_render, "compose": cmd_compose,
            "gradcheck": cmd_gradcheck, "bench": cmd_bench, "synth": cmd_synth}


def main(argv=None) -> int:
    from .fitter import ConfigError, FitDivergence
    from .io import SceneIOError
    from .scene import SceneError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _set_threads(args.threads)
        return COMMANDS[args.command](args, _Progress(args.progress))
    except UsageError as exc:
        print(f"error [usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FitDivergence as exc:
        print(f"error [fit]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SceneIOError, SceneError, ConfigError, ValueError, OSError) as exc:
        stage = getattr(args, "command", "load") if "args" in locals() else "load"
        print(f"error [{stage}]: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
