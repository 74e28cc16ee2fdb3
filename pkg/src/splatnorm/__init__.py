"""Pixel-wise Gaussian splatting with alpha normalization and a 3D
sampling-based scale regularizer.

Rendering: project -> depth sort -> tiled front-to-back compositing, plus a
brute-force reference. Alpha normalization keeps brightness invariant to the
multi-view overlap count; the 3D branch composites plane-sampled Gaussian
falloffs and its loss pressures scales to grow, closing hole artifacts.
"""

from .alphanorm import (
    CountMap,
    NormalizationConfig,
    alpha_normalize,
    count_map,
    normalization_exponents,
    normalize_scene,
    per_gaussian_counts,
    warp_depth,
)
from .core import (
    BehindCameraError,
    Camera,
    DepthMap,
    Gaussian,
    InvalidInputError,
    ParseError,
    Scene,
    backproject,
    project,
    project_points,
    quat_to_rotation,
)
from .fit import FitConfig, FitDivergedError, fit, grad_loss2d, grad_loss3d, write_history_csv
from .io import (
    load_camera,
    load_png,
    load_scene,
    read_pfm,
    save_camera,
    save_png,
    save_scene,
    write_pfm,
)
from .loss import LossConfig, hole_fraction, loss2d, loss3d, mse, psnr, ssim, total_loss
from .projection import Splat2D, Splats, covariance3d, footprint_radius, project_gaussian, project_scene
from .rasterizer import RenderOptions, RenderOutput, depth_sort_indices, render, render_reference
from .reg3d import (
    NormalMap,
    Ray,
    eval_gaussian3d,
    normal_from_depth,
    ray_plane_intersect,
    render3d,
    resolve_normals,
)
from .scenegen import (
    GaussianizeOptions,
    Plane,
    PlaneViews,
    depth_to_gaussians,
    duplicate_scene,
    make_plane_views,
)

__version__ = "0.1.0"

__all__ = [
    "BehindCameraError",
    "Camera",
    "CountMap",
    "DepthMap",
    "FitConfig",
    "FitDivergedError",
    "Gaussian",
    "GaussianizeOptions",
    "InvalidInputError",
    "LossConfig",
    "NormalMap",
    "NormalizationConfig",
    "ParseError",
    "Plane",
    "PlaneViews",
    "Ray",
    "RenderOptions",
    "RenderOutput",
    "Scene",
    "Splat2D",
    "Splats",
    "alpha_normalize",
    "backproject",
    "count_map",
    "covariance3d",
    "depth_sort_indices",
    "depth_to_gaussians",
    "duplicate_scene",
    "eval_gaussian3d",
    "fit",
    "footprint_radius",
    "grad_loss2d",
    "grad_loss3d",
    "hole_fraction",
    "load_camera",
    "load_png",
    "load_scene",
    "loss2d",
    "loss3d",
    "make_plane_views",
    "mse",
    "normal_from_depth",
    "normalization_exponents",
    "normalize_scene",
    "per_gaussian_counts",
    "project",
    "project_gaussian",
    "project_points",
    "project_scene",
    "psnr",
    "quat_to_rotation",
    "ray_plane_intersect",
    "read_pfm",
    "render",
    "render3d",
    "render_reference",
    "resolve_normals",
    "save_camera",
    "save_png",
    "save_scene",
    "ssim",
    "total_loss",
    "warp_depth",
    "write_history_csv",
    "write_pfm",
]
