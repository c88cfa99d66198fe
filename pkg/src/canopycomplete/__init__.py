"""Reconstruction of complete 3D point clouds for occluded crop
populations: simulated scene assembly with ray-traced occlusion labels,
a GAN-trained multi-resolution graph-convolutional completion network,
and downstream volumetric yield indexing."""

__version__ = "0.1.0"

from .geom import Aabb, PointCloud, TriangleMesh, build_bvh, compute_aabb, fps_sample, knn, voxel_volume
from .metrics import chamfer_sq, ols_fit_r2, ssim3d
from .network import NetworkConfig
from .occlusion import CameraRig, classify_occlusion, classify_occlusion_bruteforce, ring_cameras
from .popsim import PlantAsset, PlotLayout, assemble_population, make_sample
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "Aabb", "PointCloud", "TriangleMesh", "build_bvh", "compute_aabb",
    "fps_sample", "knn", "voxel_volume", "chamfer_sq", "ols_fit_r2", "ssim3d",
    "NetworkConfig", "CameraRig", "classify_occlusion",
    "classify_occlusion_bruteforce", "ring_cameras", "PlantAsset",
    "PlotLayout", "assemble_population", "make_sample", "TrainConfig",
    "load_checkpoint", "save_checkpoint", "train",
]
