"""Perspective projection and pyramid-level cameras."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Camera, PointCloud, SceneError

Z_NEAR = 1e-4


@dataclass(frozen=True, eq=False)
class ProjectedPoints:
    screen_xy: np.ndarray  # (N, 2) continuous pixel coordinates
    depth: np.ndarray  # (N,) camera-space z
    valid: np.ndarray  # (N,) bool

    def __len__(self) -> int:
        return self.depth.shape[0]


def project(cloud: PointCloud | np.ndarray, camera: Camera) -> ProjectedPoints:
    """Project points through ``camera``. Points behind the near plane or off
    the canvas stay in the arrays with ``valid=False``."""
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, np.float64)
    cam = pos @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    in_front = z > Z_NEAR
    safe_z = np.where(in_front, z, 1.0)
    fx, fy = camera.focal
    cx, cy = camera.principal
    xy = np.empty((pos.shape[0], 2))
    xy[:, 0] = fx * (cam[:, 0] / safe_z) + cx
    xy[:, 1] = fy * (cam[:, 1] / safe_z) + cy
    xy[~in_front] = np.nan
    with np.errstate(invalid="ignore"):
        px = np.floor(xy)
        valid = (in_front
                 & (px[:, 0] >= 0) & (px[:, 0] < camera.width)
                 & (px[:, 1] >= 0) & (px[:, 1] < camera.height))
    return ProjectedPoints(xy, z, valid)


def pyramid_camera(camera: Camera, level: int) -> Camera:
    if level < 0:
        raise ValueError("pyramid level must be >= 0")
    if level == 0:
        return camera
    f = 2 ** level
    w, h = camera.canvas
    if w % f or h % f:
        raise SceneError(f"canvas {camera.canvas} is not divisible by {f}; pad it first")
    fx, fy = camera.focal
    cx, cy = camera.principal
    return camera.with_intrinsics((fx / f, fy / f), (cx / f, cy / f), (w // f, h // f))


def padded_canvas(canvas: tuple[int, int], levels: int) -> tuple[int, int]:
    """Round a canvas up to the next multiple of ``2**levels`` on both axes."""
    f = 2 ** levels
    return (-(-canvas[0] // f) * f, -(-canvas[1] // f) * f)


def pad_camera(camera: Camera, levels: int) -> Camera:
    canvas = padded_canvas(camera.canvas, levels)
    if canvas == camera.canvas:
        return camera
    return camera.with_intrinsics(camera.focal, camera.principal, canvas)
