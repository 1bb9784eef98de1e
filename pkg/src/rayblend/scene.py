"""Core scene data types: point clouds, descriptor sets, cameras and datasets."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

DEFAULT_DESCRIPTOR_DIM = 8
INIT_SCALE = 0.01
# raw alpha starts positive: ReLU gives no gradient to points initialised below zero
INIT_ALPHA = 0.1
ORTHO_TOL = 1e-6


class SceneError(ValueError):
    """Raised when scene data violates a size or validity invariant."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    positions: np.ndarray  # (N, 3) world coordinates

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise SceneError(f"positions must be (N, 3), got {pos.shape}")
        if pos.shape[0] < 1:
            raise SceneError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pos)):
            raise SceneError("point positions must be finite")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def transformed(self, matrix: np.ndarray) -> PointCloud:
        """Apply a 4x4 affine transform to every point."""
        matrix = np.asarray(matrix, dtype=np.float64)
        return PointCloud(self.positions @ matrix[:3, :3].T + matrix[:3, 3])


@dataclass
class DescriptorSet:
    """Per-point descriptors: channels ``0..M-2`` are pseudocolor, the last
    channel is the raw (pre-activation) transparency."""

    values: np.ndarray  # (N, M)

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True)
        if vals.ndim != 2 or vals.shape[1] < 2:
            raise SceneError(f"descriptors must be (N, M) with M >= 2, got {vals.shape}")
        if vals.shape[0] < 1:
            raise SceneError("descriptor set must have at least one row")
        if not np.all(np.isfinite(vals)):
            raise SceneError("descriptor values must be finite")
        self.values = vals

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def colors(self) -> np.ndarray:
        return self.values[:, :-1]

    @property
    def raw_alpha(self) -> np.ndarray:
        return self.values[:, -1]

    def copy(self) -> DescriptorSet:
        return DescriptorSet(self.values)

    @classmethod
    def random(cls, n: int, dim: int = DEFAULT_DESCRIPTOR_DIM,
               rng: np.random.Generator | None = None) -> DescriptorSet:
        rng = np.random.default_rng() if rng is None else rng
        values = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(n, dim))
        values[:, -1] += INIT_ALPHA
        return cls(values)


def interpolate_descriptors(a: DescriptorSet, b: DescriptorSet, t: float) -> DescriptorSet:
    if a.values.shape != b.values.shape:
        raise SceneError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    if t == 0:
        return a.copy()
    if t == 1:
        return b.copy()
    return DescriptorSet((1.0 - t) * a.values + t * b.values)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera. ``rotation``/``translation`` map world to camera space."""

    rotation: np.ndarray
    translation: np.ndarray
    focal: tuple[float, float]
    principal: tuple[float, float]
    canvas: tuple[int, int]  # (W, H)
    name: str = ""

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise SceneError("camera pose must be finite")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ORTHO_TOL:
            raise SceneError("camera rotation is not orthonormal")
        fx, fy = (float(v) for v in self.focal)
        cx, cy = (float(v) for v in self.principal)
        w, h = (int(v) for v in self.canvas)
        if fx <= 0 or fy <= 0:
            raise SceneError("focal lengths must be positive")
        if w < 1 or h < 1:
            raise SceneError("canvas must be at least 1x1")
        rot.flags.writeable = False
        trans.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "focal", (fx, fy))
        object.__setattr__(self, "principal", (cx, cy))
        object.__setattr__(self, "canvas", (w, h))

    @property
    def width(self) -> int:
        return self.canvas[0]

    @property
    def height(self) -> int:
        return self.canvas[1]

    def with_intrinsics(self, focal, principal, canvas) -> Camera:
        return replace(self, focal=focal, principal=principal, canvas=canvas)

    @classmethod
    def look_at(cls, eye, target, up, focal, canvas, principal=None, name="") -> Camera:
        """Build a camera at ``eye`` looking toward ``target`` (+z forward, +y down)."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        if np.isscalar(focal):
            focal = (focal, focal)
        if principal is None:
            principal = (canvas[0] / 2.0, canvas[1] / 2.0)
        return cls(rot, -rot @ eye, focal, principal, canvas, name)


@dataclass
class Scene:
    cloud: PointCloud
    descriptors: DescriptorSet
    jitter_exponent: float = 1.0
    label: str = "scene"

    def __post_init__(self):
        if len(self.cloud) != len(self.descriptors):
            raise SceneError(
                f"scene '{self.label}': {len(self.cloud)} points but "
                f"{len(self.descriptors)} descriptors")
        if not self.jitter_exponent >= 0:
            raise SceneError("jitter exponent must be >= 0")

    def __len__(self) -> int:
        return len(self.cloud)

    def copy(self) -> Scene:
        return Scene(self.cloud, self.descriptors.copy(), self.jitter_exponent, self.label)

    @classmethod
    def initialize(cls, cloud: PointCloud, dim: int = DEFAULT_DESCRIPTOR_DIM,
                   rng: np.random.Generator | None = None, label: str = "scene") -> Scene:
        return cls(cloud, DescriptorSet.random(len(cloud), dim, rng), 1.0, label)


class TargetKind(Enum):
    RGB = "rgb"
    RGBA = "rgba"


@dataclass
class FitDataset:
    views: list[tuple[Camera, np.ndarray]]
    target_kind: TargetKind = TargetKind.RGBA
    view_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.views:
            raise SceneError("dataset needs at least one view")
        channels = 4 if self.target_kind is TargetKind.RGBA else 3
        checked = []
        for k, (cam, img) in enumerate(self.views):
            img = np.asarray(img, dtype=np.float64)
            if img.shape != (cam.height, cam.width, channels):
                raise SceneError(
                    f"view {k}: target shape {img.shape} does not match canvas "
                    f"{cam.canvas} with {channels} channels")
            if channels == 4 and (img[..., 3].min() < 0 or img[..., 3].max() > 1):
                raise SceneError(f"view {k}: target alpha outside [0, 1]")
            checked.append((cam, img))
        self.views = checked
        if not self.view_ids:
            self.view_ids = [cam.name or f"{k:04d}" for k, (cam, _) in enumerate(self.views)]
        if len(self.view_ids) != len(self.views):
            raise SceneError("view id count does not match view count")

    def __len__(self) -> int:
        return len(self.views)

    def subset(self, indices) -> FitDataset:
        indices = list(indices)
        return FitDataset([self.views[i] for i in indices], self.target_kind,
                          [self.view_ids[i] for i in indices])
