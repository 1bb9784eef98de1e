"""Alpha activation and front-to-back (UNDER) compositing of ray contents."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange


class CompositingError(ValueError):
    pass


@dataclass
class RawImage:
    features: np.ndarray  # (H, W, M-1) blended pseudocolor
    alpha: np.ndarray  # (H, W) accumulated opacity

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def stacked(self) -> np.ndarray:
        """Return the (H, W, M) array with accumulated alpha as the last channel."""
        return np.concatenate([self.features, self.alpha[..., None]], axis=-1)

    @classmethod
    def empty(cls, height: int, width: int, channels: int) -> RawImage:
        return cls(np.zeros((height, width, channels)), np.zeros((height, width)))


def activate_alpha(raw):
    """ReLU followed by tanh; maps raw transparency to [0, 1)."""
    return np.tanh(np.maximum(raw, 0.0))


def jitter_alphas(alphas, p: float, mu: float):
    return np.asarray(alphas, dtype=np.float64) * (float(p) ** float(mu))


@njit(cache=True)
def _under_segment(colors, alphas, order, start, count, out):
    # Accumulates into ``out``; returns the remaining transmittance.
    trans = 1.0
    n_ch = colors.shape[1]
    for k in range(count):
        i = order[start + k]
        a = alphas[i]
        w = a * trans
        for c in range(n_ch):
            out[c] += w * colors[i, c]
        trans *= 1.0 - a
    return trans


@njit(parallel=True, cache=True)
def _blend_pixels(offsets, order, lengths, colors, alphas, out_feat, out_alpha):
    for p in prange(lengths.shape[0]):
        trans = _under_segment(colors, alphas, order, offsets[p], lengths[p], out_feat[p])
        out_alpha[p] = 1.0 - trans


def blend_ray(colors, alphas) -> tuple[np.ndarray, float]:
    """Composite one depth-sorted ray front to back.

    ``colors`` is (l, M-1) and ``alphas`` holds l activated alphas in [0, 1].
    Returns the blended pseudocolor and the accumulated alpha.
    """
    alphas = np.ascontiguousarray(alphas, dtype=np.float64).reshape(-1)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    if colors.ndim == 1:
        colors = colors.reshape(len(alphas), -1) if len(alphas) else colors.reshape(0, 0)
    if colors.shape[0] != alphas.shape[0]:
        raise CompositingError("colors and alphas differ in length")
    if alphas.size and (alphas.min() < 0.0 or alphas.max() > 1.0 or np.isnan(alphas).any()):
        raise CompositingError("alphas must lie in [0, 1]; activate before blending")
    out = np.zeros(colors.shape[1])
    order = np.arange(len(alphas), dtype=np.int64)
    trans = _under_segment(colors, alphas, order, 0, len(alphas), out)
    return out, 1.0 - trans


def blend_rays(rays, colors: np.ndarray, alphas: np.ndarray) -> RawImage:
    """Composite every ray of a :class:`~rayblend.raster.RayBuffer`."""
    w, h = rays.canvas
    n_ch = colors.shape[1]
    feat = np.zeros((h * w, n_ch))
    alpha = np.zeros(h * w)
    _blend_pixels(rays.offsets, rays.order, rays.lengths.reshape(-1),
                  np.ascontiguousarray(colors, dtype=np.float64),
                  np.ascontiguousarray(alphas, dtype=np.float64), feat, alpha)
    return RawImage(feat.reshape(h, w, n_ch), alpha.reshape(h, w))


def blend_background(rendered_rgb, rendered_alpha, background) -> np.ndarray:
    rgb = np.asarray(rendered_rgb, dtype=np.float64)
    a = np.asarray(rendered_alpha, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if rgb.shape != bg.shape or a.shape != rgb.shape[:-1]:
        raise CompositingError(
            f"size mismatch: rgb {rgb.shape}, alpha {a.shape}, background {bg.shape}")
    return (1.0 - a)[..., None] * bg + rgb


def _overlay(c_f, a_f, c_b, a_b):
    color = c_f + c_b * ((1.0 - a_f) * a_b)[..., None]
    alpha = 1.0 - (1.0 - a_b) * (1.0 - a_f)
    return color, alpha


def overlay_raw(front: RawImage, back: RawImage) -> RawImage:
    """Place ``front`` entirely in front of ``back``.

    The back color carries an extra ``A_b`` factor; this mirrors the overlay
    augmentation used during training and is intentionally not the plain
    premultiplied UNDER composite.
    """
    if front.features.shape != back.features.shape:
        raise CompositingError(
            f"size mismatch: {front.features.shape} vs {back.features.shape}")
    return RawImage(*_overlay(front.features, front.alpha, back.features, back.alpha))


def overlay_targets(front: np.ndarray, back: np.ndarray) -> np.ndarray:
    front = np.asarray(front, dtype=np.float64)
    back = np.asarray(back, dtype=np.float64)
    if front.shape != back.shape or front.shape[-1] != 4:
        raise CompositingError(f"RGBA size mismatch: {front.shape} vs {back.shape}")
    color, alpha = _overlay(front[..., :3], front[..., 3], back[..., :3], back[..., 3])
    return np.concatenate([color, alpha[..., None]], axis=-1)
