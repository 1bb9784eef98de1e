"""Ray-grouped rasterization: bucket projected points per pixel, sort each
bucket by depth and keep the nearest ``max_len`` entries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .compositor import RawImage, activate_alpha, blend_rays
from .projection import ProjectedPoints, project, pyramid_camera
from .scene import Camera, Scene

DEFAULT_MAX_RAY_LEN = 50
DEFAULT_LEVELS = 4
SMALL_BUCKET = 24


@dataclass
class RayBuffer:
    """Per-pixel depth-sorted point buckets, stored compactly.

    ``order[offsets[p]:offsets[p] + lengths.flat[p]]`` are the point indices kept
    for flat pixel ``p = y * W + x``, nearest first.
    """

    offsets: np.ndarray  # (H*W + 1,) int64
    order: np.ndarray  # (n_valid,) int64
    lengths: np.ndarray  # (H, W) int64
    max_len: int
    canvas: tuple[int, int]

    @property
    def indices(self) -> np.ndarray:
        """Dense (H, W, L) index array padded with -1."""
        w, h = self.canvas
        out = np.full((h * w, self.max_len), -1, dtype=np.int64)
        lens = self.lengths.reshape(-1)
        rows = np.repeat(np.arange(h * w), lens)
        slot = np.arange(rows.size) - np.repeat(np.cumsum(lens) - lens, lens)
        out[rows, slot] = self.order[self.offsets[rows] + slot]
        return out.reshape(h, w, self.max_len)

    def kept(self) -> np.ndarray:
        """Indices of every point kept in some ray (unordered)."""
        lens = self.lengths.reshape(-1)
        rows = np.repeat(np.arange(lens.size), lens)
        slot = np.arange(rows.size) - np.repeat(np.cumsum(lens) - lens, lens)
        return self.order[self.offsets[rows] + slot]


@njit(cache=True)
def _bucket_points(pixel, n_pixels):
    # counting sort: histogram, exclusive scan, then a stable scatter in index order
    offsets = np.zeros(n_pixels + 1, dtype=np.int64)
    for i in range(pixel.shape[0]):
        if pixel[i] >= 0:
            offsets[pixel[i] + 1] += 1
    for p in range(n_pixels):
        offsets[p + 1] += offsets[p]
    cursor = offsets[:-1].copy()
    order = np.empty(offsets[n_pixels], dtype=np.int64)
    for i in range(pixel.shape[0]):
        p = pixel[i]
        if p >= 0:
            order[cursor[p]] = i
            cursor[p] += 1
    return offsets, order


@njit(parallel=True, cache=True)
def _sort_buckets(offsets, order, depth, max_len, lengths):
    for p in prange(offsets.shape[0] - 1):
        s = offsets[p]
        n = offsets[p + 1] - s
        if n > SMALL_BUCKET:
            seg = order[s:s + n].copy()
            perm = np.argsort(depth[seg], kind="mergesort")
            for k in range(n):
                order[s + k] = seg[perm[k]]
        else:
            # insertion sort, stable: ties keep ascending point index
            for k in range(1, n):
                idx = order[s + k]
                d = depth[idx]
                j = k - 1
                while j >= 0 and depth[order[s + j]] > d:
                    order[s + j + 1] = order[s + j]
                    j -= 1
                order[s + j + 1] = idx
        lengths[p] = min(n, max_len)


def pixel_ids(proj: ProjectedPoints, canvas: tuple[int, int]) -> np.ndarray:
    w, _ = canvas
    pix = np.full(len(proj), -1, dtype=np.int64)
    v = proj.valid
    xy = np.floor(proj.screen_xy[v]).astype(np.int64)
    pix[v] = xy[:, 1] * w + xy[:, 0]
    return pix


def bucket_points(proj: ProjectedPoints, canvas: tuple[int, int]):
    w, h = canvas
    return _bucket_points(pixel_ids(proj, canvas), w * h)


def sort_buckets(offsets, order, depth, canvas, max_len: int) -> RayBuffer:
    w, h = canvas
    lengths = np.zeros(h * w, dtype=np.int64)
    _sort_buckets(offsets, order, np.ascontiguousarray(depth, dtype=np.float64),
                  max_len, lengths)
    return RayBuffer(offsets, order, lengths.reshape(h, w), max_len, canvas)


def group_rays(proj: ProjectedPoints, canvas: tuple[int, int], max_len: int) -> RayBuffer:
    if max_len < 1:
        raise ValueError("max ray length must be >= 1")
    offsets, order = bucket_points(proj, canvas)
    return sort_buckets(offsets, order, proj.depth, canvas, max_len)


@dataclass
class Forward:
    """A rendered raw-image pyramid plus everything the backward pass needs."""

    scene: Scene
    camera: Camera
    levels: int
    max_len: int
    images: list[RawImage]
    alpha_scale: float = 1.0
    force_opaque: bool = False
    rays: list[RayBuffer] = field(default_factory=list)
    alphas: np.ndarray | None = None  # activated, before jitter
    blend_alphas: np.ndarray | None = None  # what was actually composited

    @property
    def retained(self) -> bool:
        return bool(self.rays) and self.alphas is not None

    @property
    def jitter_factor(self) -> float:
        return float(self.alpha_scale) ** float(self.scene.jitter_exponent)


def render_forward(scene: Scene, camera: Camera, levels: int = DEFAULT_LEVELS,
                   max_len: int = DEFAULT_MAX_RAY_LEN, alpha_scale: float = 1.0,
                   force_opaque: bool = False, retain: bool = True) -> Forward:
    """Rasterize ``scene`` into raw images for pyramid levels ``0..levels``.

    ``alpha_scale`` rescales every activated alpha by ``alpha_scale ** mu``;
    ``force_opaque`` sets every activated alpha to 1 (hard z-buffer mode).
    """
    desc = scene.descriptors
    colors = np.ascontiguousarray(desc.colors)
    alphas = activate_alpha(desc.raw_alpha)
    if force_opaque:
        blend = np.ones_like(alphas)
    else:
        blend = alphas * (float(alpha_scale) ** float(scene.jitter_exponent))
    fwd = Forward(scene, camera, levels, max_len, [], alpha_scale, force_opaque)
    for t in range(levels + 1):
        cam_t = pyramid_camera(camera, t)
        rays = group_rays(project(scene.cloud, cam_t), cam_t.canvas, max_len)
        fwd.images.append(blend_rays(rays, colors, blend))
        if retain:
            fwd.rays.append(rays)
    if retain:
        fwd.alphas = alphas
        fwd.blend_alphas = blend
    return fwd


def rasterize_pyramid(scene: Scene, camera: Camera, levels: int = DEFAULT_LEVELS,
                      max_len: int = DEFAULT_MAX_RAY_LEN, **kwargs) -> list[RawImage]:
    return render_forward(scene, camera, levels, max_len, retain=False, **kwargs).images
