"""volbake: optimize, bake, and ship SDF scenes as real-time mesh assets.

The pipeline has three stages: differentiable volume rendering fits a
network-parameterized signed distance field to posed images; marching cubes
over contracted space bakes the field into a world-space triangle mesh; and
a per-vertex spherical-Gaussian appearance model is fit against the same
images and exported as a quantized, gzip-compressed glTF asset.
"""

from .contraction import contract, uncontract
from .density import BetaSchedule, DensityParams, beta_at, density_from_sdf
from .fields import CsgIntersection, CsgUnion, MlpSdf, PlaneSdf, SphereSdf, sdf_gradient
from .mesh import TriangleMesh, edge_manifold, morton_sort
from .meshing import (
    BakeGrid,
    BoundingHull,
    build_bounding_hull,
    clamp_with_hull,
    marching_cubes,
    region_grow,
    splat_visibility,
    to_world,
)
from .appearance import (
    FitConfig,
    VertexAppearance,
    fit_appearance,
    quantize_ste,
    render_baked,
    robust_loss,
    shade,
)
from .cameras import Camera, PosedImage, load_dataset, write_dataset
from .gltf import export_gltf, load_gltf
from .metrics import MetricsReport, psnr, ssim
from .rendering import composite, render_image, render_rays
from .scenes import AnalyticScene, load_scene, render_scene
from .synth import RingSpec, synthesize_dataset
from .training import AppearanceHead, TrainConfig, eikonal_loss, train

__version__ = "0.1.0"
