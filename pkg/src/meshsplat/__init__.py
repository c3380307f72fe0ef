"""Differentiable mesh rendering via per-triangle Gaussians and tile splatting."""

__version__ = "0.1.0"

from .mesh import (
    TriangleMesh,
    MeshError,
    MeshParseError,
    DegenerateGeometryError,
    load_mesh,
    save_mesh,
    normalize_mesh,
    make_icosphere,
    make_grid_cube,
    mesh_area_and_normals,
    sample_surface,
)
from .convert import (
    FacetGaussian,
    GaussianCloud,
    convert_mesh,
    convert_backward,
    export_gaussians,
)
from .camera import (
    Camera,
    CameraError,
    look_at,
    default_intrinsics,
    save_cameras,
    load_cameras,
)
from .render import (
    RenderOutput,
    rasterize,
    render_mesh,
    render_backward,
)
from .losses import (
    LossWeights,
    LossReport,
    color_loss,
    silhouette_loss,
    edge_length_loss,
    laplacian_loss,
    total_loss,
)
from .optim import (
    FitConfig,
    FitResult,
    VectorAdam,
    ScalarAdam,
    cosine_lr,
    fit,
    shift_initialization,
)
from .metrics import (
    MetricReport,
    chamfer_distance,
    normal_consistency,
    psnr,
    ssim,
)
from .dataset import (
    ViewDataset,
    fibonacci_hemisphere,
    hemisphere_cameras,
    make_views,
    load_views,
)
from .config import (
    ConfigError,
    RunConfig,
    load_config,
    parse_config_text,
)

__all__ = [
    "TriangleMesh",
    "MeshError",
    "MeshParseError",
    "DegenerateGeometryError",
    "load_mesh",
    "save_mesh",
    "normalize_mesh",
    "make_icosphere",
    "make_grid_cube",
    "mesh_area_and_normals",
    "sample_surface",
    "FacetGaussian",
    "GaussianCloud",
    "convert_mesh",
    "convert_backward",
    "export_gaussians",
    "Camera",
    "CameraError",
    "look_at",
    "default_intrinsics",
    "save_cameras",
    "load_cameras",
    "RenderOutput",
    "rasterize",
    "render_mesh",
    "render_backward",
    "LossWeights",
    "LossReport",
    "color_loss",
    "silhouette_loss",
    "edge_length_loss",
    "laplacian_loss",
    "total_loss",
    "FitConfig",
    "FitResult",
    "VectorAdam",
    "ScalarAdam",
    "cosine_lr",
    "fit",
    "shift_initialization",
    "MetricReport",
    "chamfer_distance",
    "normal_consistency",
    "psnr",
    "ssim",
    "ViewDataset",
    "fibonacci_hemisphere",
    "hemisphere_cameras",
    "make_views",
    "load_views",
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config_text",
]
