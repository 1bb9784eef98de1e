"""Differentiable ray-grouped point rasterizer with front-to-back alpha
compositing and descriptor fitting."""
import os

# skip numba's TBB probe (and its warning) unless the user picked a layer
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from .compositor import (RawImage, activate_alpha, blend_background, blend_ray,  # noqa: E402
                         jitter_alphas, overlay_raw, overlay_targets)
from .fitter import FitConfig, FitReport, fit, fit_pair_with_overlay  # noqa: E402
from .gradients import DescriptorGrad, backward_full, blend_ray_backward  # noqa: E402
from .head import HeadConfig  # noqa: E402
from .projection import ProjectedPoints, project, pyramid_camera  # noqa: E402
from .raster import RayBuffer, group_rays, rasterize_pyramid, render_forward  # noqa: E402
from .scene import (Camera, DescriptorSet, FitDataset, PointCloud, Scene,  # noqa: E402
                    TargetKind, interpolate_descriptors)

__version__ = "0.1.0"

__all__ = [
    "Camera", "DescriptorGrad", "DescriptorSet", "FitConfig", "FitDataset", "FitReport",
    "HeadConfig", "PointCloud", "ProjectedPoints", "RawImage", "RayBuffer", "Scene",
    "TargetKind", "activate_alpha", "backward_full", "blend_background", "blend_ray",
    "blend_ray_backward", "fit", "fit_pair_with_overlay", "group_rays",
    "interpolate_descriptors", "jitter_alphas", "overlay_raw", "overlay_targets", "project",
    "pyramid_camera", "rasterize_pyramid", "render_forward",
]
