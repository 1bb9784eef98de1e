"""Synthetic scenes and camera rigs for self-reconstruction checks and benchmarks."""
from __future__ import annotations

import numpy as np

from .head import HeadConfig
from .fitter import render_image
from .scene import Camera, DescriptorSet, FitDataset, PointCloud, Scene, TargetKind


def two_layer_scene(n_points: int = 500, dim: int = 8, back_fraction: float = 0.6,
                    rng: np.random.Generator | None = None) -> Scene:
    """An opaque back plane at z=0 with a half-transparent cloud in front of it.

    Cameras looking at the origin from the -z side see the cloud first.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    n_back = int(round(n_points * back_fraction))
    n_front = n_points - n_back
    back = np.column_stack([rng.uniform(-1, 1, n_back), rng.uniform(-1, 1, n_back),
                            np.zeros(n_back)])
    front = np.column_stack([rng.uniform(-0.6, 0.6, n_front), rng.uniform(-0.6, 0.6, n_front),
                             rng.uniform(-0.8, -0.3, n_front)])
    values = np.empty((n_points, dim))
    values[:, :-1] = rng.uniform(0.0, 1.0, size=(n_points, dim - 1))
    values[:n_back, -1] = 3.0  # tanh(3) ~ 0.995
    values[n_back:, -1] = np.arctanh(0.5)
    return Scene(PointCloud(np.concatenate([back, front])), DescriptorSet(values), 1.0,
                 "two-layer")


def orbit_cameras(count: int, canvas=(64, 64), distance: float = 3.0, cone_deg: float = 35.0,
                  focal: float | None = None, rng: np.random.Generator | None = None) -> list[Camera]:
    """Cameras on a spherical cap around -z, all aimed at the origin."""
    rng = np.random.default_rng(1) if rng is None else rng
    focal = float(canvas[0]) if focal is None else focal
    cams = []
    cos_max = np.cos(np.radians(cone_deg))
    for k in range(count):
        cos_t = rng.uniform(cos_max, 1.0)
        phi = rng.uniform(0, 2 * np.pi)
        sin_t = np.sqrt(1 - cos_t ** 2)
        eye = distance * np.array([sin_t * np.cos(phi), sin_t * np.sin(phi), -cos_t])
        cams.append(Camera.look_at(eye, np.zeros(3), (0.0, -1.0, 0.0), focal, canvas,
                                  name=f"view{k:03d}"))
    return cams


def render_dataset(scene: Scene, cameras: list[Camera], levels: int, max_len: int,
                   head: HeadConfig | None = None) -> FitDataset:
    """Targets rendered by this pipeline from known descriptors."""
    head = HeadConfig() if head is None else head
    views = [(c, render_image(scene, c, head, levels, max_len)[0]) for c in cameras]
    return FitDataset(views, TargetKind.RGBA)


def random_scene(n_points: int, canvas=(64, 64), dim: int = 8, depth=(1.0, 5.0),
                 rng: np.random.Generator | None = None) -> tuple[Scene, Camera]:
    """Points scattered through the view frustum of an identity-pose camera."""
    rng = np.random.default_rng(0) if rng is None else rng
    w, h = canvas
    cam = Camera(np.eye(3), np.zeros(3), (0.9 * w, 0.9 * h), (w / 2, h / 2), canvas)
    z = rng.uniform(*depth, size=n_points)
    xy = rng.uniform(-0.05, 1.05, size=(n_points, 2)) * [w, h]
    pos = np.column_stack([(xy[:, 0] - w / 2) / cam.focal[0] * z,
                           (xy[:, 1] - h / 2) / cam.focal[1] * z, z])
    desc = DescriptorSet(rng.uniform(-1, 1, size=(n_points, dim)))
    return Scene(PointCloud(pos), desc), cam
