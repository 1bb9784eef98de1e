"""Per-pixel heads that decode a raw-image pyramid into an RGBA image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compositor import RawImage

FUSION_THRESHOLD = 0.05


def _upsample(level_img: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return level_img
    return np.repeat(np.repeat(level_img, factor, axis=0), factor, axis=1)


def _downsum(full: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return full
    h, w = full.shape[:2]
    return full.reshape(h // factor, factor, w // factor, factor, *full.shape[2:]).sum(axis=(1, 3))


@dataclass
class HeadConfig:
    """``passthrough`` reads RGB from pseudocolor channels 0..2 and A from the
    accumulated alpha, fusing pyramid levels; ``linear`` maps the level-0 raw
    image affinely to RGBA."""

    mode: str = "passthrough"
    weights: np.ndarray | None = None  # (M, 4), linear mode
    bias: np.ndarray | None = None  # (4,)
    threshold: float = FUSION_THRESHOLD

    def __post_init__(self):
        if self.mode not in ("passthrough", "linear"):
            raise ValueError(f"unknown head mode {self.mode!r}")
        if self.mode == "linear":
            if self.weights is None:
                raise ValueError("linear head needs weights; use HeadConfig.linear_identity")
            self.weights = np.array(self.weights, dtype=np.float64)
            self.bias = (np.zeros(4) if self.bias is None
                         else np.array(self.bias, dtype=np.float64).reshape(4))
            if self.weights.ndim != 2 or self.weights.shape[1] != 4:
                raise ValueError(f"linear head weights must be (M, 4), got {self.weights.shape}")

    @classmethod
    def linear_identity(cls, dim: int) -> HeadConfig:
        """Linear head initialised to reproduce passthrough at level 0."""
        w = np.zeros((dim, 4))
        w[:min(3, dim - 1), :3] = np.eye(3)[:min(3, dim - 1)]
        w[dim - 1, 3] = 1.0
        return cls("linear", w, np.zeros(4))

    @property
    def learnable(self) -> bool:
        return self.mode == "linear"

    def forward(self, images: list[RawImage]) -> tuple[np.ndarray, dict]:
        """Decode to an (H, W, 4) RGBA image; the dict feeds :meth:`backward`."""
        if self.mode == "linear":
            stacked = images[0].stacked()
            if stacked.shape[-1] != self.weights.shape[0]:
                raise ValueError(f"head expects {self.weights.shape[0]} channels, "
                                 f"raw image has {stacked.shape[-1]}")
            return stacked @ self.weights + self.bias, {"stacked": stacked}
        if images[0].features.shape[-1] < 3:
            raise ValueError("passthrough head needs at least 3 pseudocolor channels")
        levels = len(images)
        h, w = images[0].alpha.shape
        select = np.full((h, w), levels - 1, dtype=np.int64)
        for t in range(levels - 2, -1, -1):
            select[_upsample(images[t].alpha, 2 ** t) > self.threshold] = t
        out = np.zeros((h, w, 4))
        for t in range(levels):
            mask = select == t
            if not mask.any():
                continue
            rgba = np.concatenate([images[t].features[..., :3], images[t].alpha[..., None]], -1)
            out[mask] = _upsample(rgba, 2 ** t)[mask]
        return out, {"select": select}

    def backward(self, images: list[RawImage], ctx: dict, d_rgba: np.ndarray):
        """Return per-level ``(d_features, d_alpha)`` and the head parameter grads."""
        n_ch = images[0].features.shape[-1]
        if self.mode == "linear":
            stacked = ctx["stacked"]
            d_stacked = d_rgba @ self.weights.T
            grads = [(d_stacked[..., :-1], d_stacked[..., -1])]
            for img in images[1:]:
                grads.append((np.zeros_like(img.features), np.zeros_like(img.alpha)))
            d_w = stacked.reshape(-1, n_ch + 1).T @ d_rgba.reshape(-1, 4)
            return grads, {"head_w": d_w, "head_b": d_rgba.reshape(-1, 4).sum(axis=0)}
        select = ctx["select"]
        grads = []
        for t, img in enumerate(images):
            masked = np.where((select == t)[..., None], d_rgba, 0.0)
            summed = _downsum(masked, 2 ** t)
            d_feat = np.zeros_like(img.features)
            d_feat[..., :3] = summed[..., :3]
            grads.append((d_feat, summed[..., 3]))
        return grads, {}

    def params(self) -> dict:
        if self.mode != "linear":
            return {}
        return {"head_w": self.weights, "head_b": self.bias}

    def to_dict(self) -> dict:
        d = {"mode": self.mode, "threshold": self.threshold}
        if self.mode == "linear":
            d["weights"] = self.weights.tolist()
            d["bias"] = self.bias.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> HeadConfig:
        return cls(d.get("mode", "passthrough"), d.get("weights"), d.get("bias"),
                   float(d.get("threshold", FUSION_THRESHOLD)))
