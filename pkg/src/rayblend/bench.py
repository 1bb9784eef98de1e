"""Per-phase timing of the rasterize-and-blend forward pass."""
from __future__ import annotations

import time

import numba
import numpy as np

from .compositor import activate_alpha, blend_rays
from .projection import project, pyramid_camera
from .raster import bucket_points, sort_buckets
from .synthetic import random_scene

BENCH_SCHEMA = "rayblend-bench/1"
PHASES = ("project", "group", "sort", "blend")


def time_forward(scene, camera, max_len: int, levels: int = 0) -> dict[str, float]:
    """Seconds spent in each phase for one forward pass over all levels."""
    out = dict.fromkeys(PHASES, 0.0)
    desc = scene.descriptors
    colors = np.ascontiguousarray(desc.colors)
    alphas = activate_alpha(desc.raw_alpha)
    for t in range(levels + 1):
        cam = pyramid_camera(camera, t)
        t0 = time.perf_counter()
        proj = project(scene.cloud, cam)
        t1 = time.perf_counter()
        offsets, order = bucket_points(proj, cam.canvas)
        t2 = time.perf_counter()
        rays = sort_buckets(offsets, order, proj.depth, cam.canvas, max_len)
        t3 = time.perf_counter()
        blend_rays(rays, colors, alphas)
        t4 = time.perf_counter()
        for phase, dt in zip(PHASES, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            out[phase] += dt
    return out


def run_bench(points: int, canvas=(512, 512), max_len: int = 50, repeats: int = 5,
              levels: int = 0, seed: int = 0) -> dict:
    scene, camera = random_scene(points, canvas, rng=np.random.default_rng(seed))
    time_forward(scene, camera, max_len, levels)  # JIT warm-up
    runs = [time_forward(scene, camera, max_len, levels) for _ in range(repeats)]
    median = {p: 1e3 * float(np.median([r[p] for r in runs])) for p in PHASES}
    median["total"] = 1e3 * float(np.median([sum(r.values()) for r in runs]))
    return {"schema": BENCH_SCHEMA, "points": points, "canvas": list(canvas),
            "max_len": max_len, "levels": levels, "repeats": repeats,
            "threads": numba.get_num_threads(), "median_ms": median}
