"""Reverse-mode adjoints of the raster-and-composite forward pass.

Gradients flow into descriptors (pseudocolor and raw alpha) and into the
jitter exponent. Projection and bucketing are piecewise constant and are not
differentiated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .compositor import RawImage
from .raster import Forward


class MissingForwardState(RuntimeError):
    pass


@dataclass
class DescriptorGrad:
    values: np.ndarray  # (N, M), same layout as DescriptorSet
    mu_grad: float = 0.0

    def __iadd__(self, other: DescriptorGrad):
        self.values += other.values
        self.mu_grad += other.mu_grad
        return self


def activation_backward(raw, upstream):
    raw = np.asarray(raw, dtype=np.float64)
    th = np.tanh(raw)
    return np.where(raw > 0.0, np.asarray(upstream) * (1.0 - th * th), 0.0)


@njit(cache=True)
def _under_segment_backward(colors, alphas, order, start, count, d_color, d_alpha,
                            tbuf, dcol_out, dalpha_out):
    # Prefix transmittances go into tbuf; suffix sums are carried in reverse so
    # nothing divides by (1 - alpha).
    n_ch = colors.shape[1]
    trans = 1.0
    for k in range(count):
        tbuf[start + k] = trans
        trans *= 1.0 - alphas[order[start + k]]
    suffix = 0.0  # d_color . (colour of the ray behind k, fresh transmittance)
    behind = 1.0  # prod over j > k of (1 - alpha_j)
    for k in range(count - 1, -1, -1):
        i = order[start + k]
        a = alphas[i]
        t_prev = tbuf[start + k]
        g = 0.0
        for c in range(n_ch):
            g += d_color[c] * colors[i, c]
            dcol_out[i, c] += a * t_prev * d_color[c]
        dalpha_out[i] += t_prev * (g - suffix) + d_alpha * t_prev * behind
        suffix = a * g + (1.0 - a) * suffix
        behind *= 1.0 - a


@njit(parallel=True, cache=True)
def _blend_pixels_backward(offsets, order, lengths, colors, alphas, d_feat, d_alpha,
                           dcol_out, dalpha_out):
    tbuf = np.empty(order.shape[0])
    for p in prange(lengths.shape[0]):
        _under_segment_backward(colors, alphas, order, offsets[p], lengths[p],
                                d_feat[p], d_alpha[p], tbuf, dcol_out, dalpha_out)


def blend_ray_backward(colors, alphas, d_color, d_alpha: float):
    """Adjoint of :func:`~rayblend.compositor.blend_ray` for one ray."""
    alphas = np.ascontiguousarray(alphas, dtype=np.float64).reshape(-1)
    colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(len(alphas), -1)
    d_color = np.ascontiguousarray(d_color, dtype=np.float64).reshape(-1)
    dcol = np.zeros_like(colors)
    dalpha = np.zeros_like(alphas)
    order = np.arange(len(alphas), dtype=np.int64)
    tbuf = np.empty(len(alphas))
    _under_segment_backward(colors, alphas, order, 0, len(alphas), d_color,
                            float(d_alpha), tbuf, dcol, dalpha)
    return dcol, dalpha


def backward_full(fwd: Forward | None, level_grads, tamper: float = 0.0) -> DescriptorGrad:
    """Pull per-level raw-image gradients back onto the scene descriptors.

    ``level_grads`` holds one ``(d_features, d_alpha)`` pair (or a RawImage
    carrying them) per pyramid level. ``tamper`` perturbs the alpha adjoint and
    exists only so the gradient checker can be shown to fail.
    """
    if fwd is None or not fwd.retained:
        raise MissingForwardState("backward needs a forward pass rendered with retain=True")
    if len(level_grads) != len(fwd.rays):
        raise ValueError(f"expected {len(fwd.rays)} level gradients, got {len(level_grads)}")
    desc = fwd.scene.descriptors
    colors = np.ascontiguousarray(desc.colors)
    n, m = desc.values.shape
    dcol = np.zeros((n, m - 1))
    dblend = np.zeros(n)
    for rays, grad in zip(fwd.rays, level_grads):
        if isinstance(grad, RawImage):
            d_feat, d_alpha = grad.features, grad.alpha
        else:
            d_feat, d_alpha = grad
        w, h = rays.canvas
        _blend_pixels_backward(
            rays.offsets, rays.order, rays.lengths.reshape(-1), colors, fwd.blend_alphas,
            np.ascontiguousarray(d_feat, dtype=np.float64).reshape(h * w, m - 1),
            np.ascontiguousarray(d_alpha, dtype=np.float64).reshape(h * w),
            dcol, dblend)
    if tamper:
        dblend *= 1.0 + tamper
    out = np.zeros((n, m))
    out[:, :-1] = dcol
    mu_grad = 0.0
    if not fwd.force_opaque:
        p = float(fwd.alpha_scale)
        factor = fwd.jitter_factor
        if 0.0 < p and p != 1.0:
            mu_grad = float(np.dot(dblend, fwd.alphas)) * factor * math.log(p)
        out[:, -1] = activation_backward(desc.raw_alpha, dblend * factor)
    return DescriptorGrad(out, mu_grad)


def overlay_raw_backward(front: RawImage, back: RawImage, d_color, d_alpha):
    """Adjoint of :func:`~rayblend.compositor.overlay_raw`.

    Returns ``((d_front_color, d_front_alpha), (d_back_color, d_back_alpha))``.
    """
    a_f, c_b, a_b = front.alpha, back.features, back.alpha
    dot_b = np.sum(d_color * c_b, axis=-1)
    d_cf = d_color.copy()
    d_af = -dot_b * a_b + d_alpha * (1.0 - a_b)
    d_cb = d_color * ((1.0 - a_f) * a_b)[..., None]
    d_ab = dot_b * (1.0 - a_f) + d_alpha * (1.0 - a_f)
    return (d_cf, d_af), (d_cb, d_ab)
