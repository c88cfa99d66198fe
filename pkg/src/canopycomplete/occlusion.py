"""Surface/occluded labeling of canopy points by ray-traced visibility.

A point is a surface point if at least one camera of the rig has an
unobstructed line of sight to it; it is occluded if geometry blocks the
segment to every camera. Rays start ``self_eps`` off the point so a point
lying on a mesh face never shadows itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geom import Bvh, PointCloud, TriangleMesh, build_bvh

DEFAULT_SELF_EPS = 1e-4  # meters; below point spacing, far above float noise


@dataclass(frozen=True)
class CameraRig:
    """Camera optical centers, one row per camera."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or len(pos) < 1:
            raise ValueError("rig needs at least one (x, y, z) camera position")
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.positions)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(d)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit length, |d| = {norm}")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass
class OcclusionLabels:
    """Per-point occlusion flags and blocked-view counts.

    occluded[i] is true exactly when blocked_views[i] == n_views.
    """

    occluded: np.ndarray
    blocked_views: np.ndarray
    n_views: int

    def __post_init__(self):
        self.occluded = np.asarray(self.occluded, dtype=bool)
        self.blocked_views = np.asarray(self.blocked_views, dtype=np.int64)
        if self.occluded.shape != self.blocked_views.shape:
            raise ValueError("occluded and blocked_views must be parallel")
        if not np.array_equal(self.occluded, self.blocked_views == self.n_views):
            raise ValueError("occluded flag must mean blocked in all views")

    @property
    def surface(self) -> np.ndarray:
        return ~self.occluded


def ring_cameras(center, distance: float, elevation_deg: float, count: int) -> CameraRig:
    """A ring of cameras around (and above) a scene center.

    ``count`` positions evenly spaced in azimuth, horizontal radius
    distance*cos(elevation), height distance*sin(elevation) above the
    center; azimuths start at 0 and step 360/count degrees.
    """
    if distance <= 0:
        raise ValueError("camera distance must be positive")
    if count < 1:
        raise ValueError("need at least one camera")
    center = np.asarray(center, dtype=np.float64).reshape(3)
    elev = math.radians(elevation_deg)
    radius = distance * math.cos(elev)
    height = distance * math.sin(elev)
    az = 2.0 * math.pi * np.arange(count) / count
    positions = np.stack(
        [center[0] + radius * np.cos(az),
         center[1] + radius * np.sin(az),
         np.full(count, center[2] + height)],
        axis=1,
    )
    return CameraRig(positions)


def intersect_ray_triangle(ray: Ray, triangle, t_max: float, eps: float = 1e-9):
    """Hit parameter t in (eps, t_max - eps) for a ray against one triangle.

    Segment semantics: hits at or beyond t_max - eps do not count.
    Boundary hits (a barycentric coordinate of exactly 0) count; degenerate
    triangles never hit. Returns None on a miss.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    tri = np.asarray(triangle, dtype=np.float64).reshape(3, 3)
    v0 = np.ascontiguousarray(tri[0])
    e1 = np.ascontiguousarray(tri[1] - tri[0])
    e2 = np.ascontiguousarray(tri[2] - tri[0])
    t = _kernels.ray_triangle(ray.origin, ray.direction, v0, e1, e2, eps, t_max - eps)
    return None if t < 0 else float(t)


def _labels_from_blocked(blocked: np.ndarray, n_views: int) -> OcclusionLabels:
    return OcclusionLabels(blocked == n_views, blocked, n_views)


def classify_occlusion(cloud: PointCloud, mesh: TriangleMesh, bvh: Bvh,
                       rig: CameraRig, self_eps: float = DEFAULT_SELF_EPS) -> OcclusionLabels:
    """Label every point surface/occluded against the scene mesh via the BVH.

    A view is blocked iff some triangle intersects the open segment from
    point + self_eps toward the camera; a camera coincident with the point
    counts as unblocked.
    """
    if self_eps <= 0:
        raise ValueError("self_eps must be positive")
    blocked = _kernels.classify_bvh(
        np.ascontiguousarray(cloud.points), np.ascontiguousarray(rig.positions),
        bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
        bvh.node_start, bvh.node_count, bvh.tri_v0, bvh.tri_e1, bvh.tri_e2,
        float(self_eps),
    )
    return _labels_from_blocked(blocked, len(rig))


def classify_occlusion_bruteforce(cloud: PointCloud, mesh: TriangleMesh, rig: CameraRig,
                                  self_eps: float = DEFAULT_SELF_EPS) -> OcclusionLabels:
    """Reference classifier scanning every triangle for every point/camera
    pair; O(points x cameras x triangles). Serves as the testing oracle for
    the BVH path."""
    if self_eps <= 0:
        raise ValueError("self_eps must be positive")
    if len(mesh.triangles) == 0:
        n = len(cloud)
        return _labels_from_blocked(np.zeros(n, dtype=np.int64), len(rig))
    a, b, c = mesh.triangle_corners()
    blocked = _kernels.classify_brute(
        np.ascontiguousarray(cloud.points), np.ascontiguousarray(rig.positions),
        np.ascontiguousarray(a), np.ascontiguousarray(b - a), np.ascontiguousarray(c - a),
        float(self_eps),
    )
    return _labels_from_blocked(blocked, len(rig))


def label_cloud(cloud: PointCloud, labels: OcclusionLabels) -> PointCloud:
    """Copy of the cloud with the occluded flag attached."""
    return PointCloud(
        points=cloud.points,
        organ=cloud.organ,
        plant_id=cloud.plant_id,
        occluded=labels.occluded.astype(np.uint8),
        extras=dict(cloud.extras),
    )


def classify_scene(cloud: PointCloud, mesh: TriangleMesh, rig: CameraRig,
                   self_eps: float = DEFAULT_SELF_EPS) -> OcclusionLabels:
    """Convenience wrapper: build the BVH and classify."""
    return classify_occlusion(cloud, mesh, build_bvh(mesh), rig, self_eps)
