"""Per-pixel image losses with exact gradients, and image metrics."""
from __future__ import annotations

import numpy as np

from .compositor import blend_background


class LossError(ValueError):
    pass


def _pixel_loss(pred, target, kind: str):
    diff = pred - target
    if kind == "l1":
        return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size
    if kind == "l2":
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    raise LossError(f"unknown loss {kind!r}")


def compute_loss(pred, target, loss_rgb: str = "l1", beta: float = 1.0, background=None):
    """Loss between a predicted RGBA image and an RGB or RGBA target.

    RGBA target without background: ``loss_rgb(RGB) + beta * mean|dA|``.
    RGB target: the prediction is blended over ``background`` first and only
    the colour loss applies. An RGBA target with a background is blended the
    same way as the prediction. Returns ``(loss, d_loss / d_pred)``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape[-1] != 4:
        raise LossError(f"prediction must be RGBA, got {pred.shape}")
    if target.shape[:-1] != pred.shape[:-1] or target.shape[-1] not in (3, 4):
        raise LossError(f"size mismatch: pred {pred.shape}, target {target.shape}")
    grad = np.zeros_like(pred)
    if target.shape[-1] == 3 or background is not None:
        if background is None:
            raise LossError("an RGB target needs a background image to blend against")
        background = np.asarray(background, dtype=np.float64)
        if background.shape != pred.shape[:-1] + (3,):
            raise LossError(f"background shape {background.shape} does not match {pred.shape}")
        blended = blend_background(pred[..., :3], pred[..., 3], background)
        if target.shape[-1] == 4:
            target = blend_background(target[..., :3], target[..., 3], background)
        loss, g = _pixel_loss(blended, target, loss_rgb)
        grad[..., :3] = g
        grad[..., 3] = -np.sum(g * background, axis=-1)
        return loss, grad
    loss, g = _pixel_loss(pred[..., :3], target[..., :3], loss_rgb)
    grad[..., :3] = g
    if beta:
        da = pred[..., 3] - target[..., 3]
        loss += beta * float(np.mean(np.abs(da)))
        grad[..., 3] = beta * np.sign(da) / da.size
    return loss, grad


def psnr(pred, target, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(target, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def l1(pred, target) -> float:
    return float(np.mean(np.abs(np.asarray(pred, np.float64) - np.asarray(target, np.float64))))
