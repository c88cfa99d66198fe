"""Primitive-shape plant assets for smoke tests and pipeline demos.

A toy plant is a thin stem cylinder topped by a closed canopy ellipsoid
with a smaller ellipsoid nested inside it; the inner shell and the canopy
underside are invisible from a surrounding camera ring, so toy scenes
exercise the full occlusion/completion pipeline without real data.
Canopy surfaces are labeled silique, the stem stem.
"""

from __future__ import annotations

import numpy as np

from .geom import PointCloud, TriangleMesh
from .popsim import PlantAsset

ORGAN_SILIQUE = 0
ORGAN_STEM = 1


def uv_sphere(n_rings: int = 6, n_segments: int = 10) -> TriangleMesh:
    """Unit sphere triangulated by latitude rings and longitude segments."""
    verts = [(0.0, 0.0, 1.0)]
    for r in range(1, n_rings):
        phi = np.pi * r / n_rings
        for s in range(n_segments):
            theta = 2.0 * np.pi * s / n_segments
            verts.append((np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)))
    verts.append((0.0, 0.0, -1.0))
    last = len(verts) - 1

    def ring(r, s):
        return 1 + (r - 1) * n_segments + (s % n_segments)

    tris = []
    for s in range(n_segments):
        tris.append((0, ring(1, s), ring(1, s + 1)))
        tris.append((last, ring(n_rings - 1, s + 1), ring(n_rings - 1, s)))
    for r in range(1, n_rings - 1):
        for s in range(n_segments):
            a, b = ring(r, s), ring(r, s + 1)
            c, d = ring(r + 1, s), ring(r + 1, s + 1)
            tris.append((a, c, d))
            tris.append((a, d, b))
    return TriangleMesh(np.array(verts), np.array(tris))


def tube(radius: float, z0: float, z1: float, n_segments: int = 8) -> TriangleMesh:
    """Open cylinder wall between two heights."""
    theta = 2.0 * np.pi * np.arange(n_segments) / n_segments
    bottom = np.stack([radius * np.cos(theta), radius * np.sin(theta), np.full(n_segments, z0)], axis=1)
    top = bottom.copy()
    top[:, 2] = z1
    verts = np.concatenate([bottom, top])
    tris = []
    for s in range(n_segments):
        a, b = s, (s + 1) % n_segments
        c, d = s + n_segments, (s + 1) % n_segments + n_segments
        tris.append((a, b, d))
        tris.append((a, d, c))
    return TriangleMesh(verts, np.array(tris))


def transform_mesh(mesh: TriangleMesh, scale, offset) -> TriangleMesh:
    scale = np.asarray(scale, dtype=np.float64).reshape(3)
    offset = np.asarray(offset, dtype=np.float64).reshape(3)
    return TriangleMesh(mesh.vertices * scale + offset, mesh.triangles)


def merge_meshes(meshes) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        tris.append(m.triangles + off)
        off += len(m.vertices)
    return TriangleMesh(np.concatenate(verts), np.concatenate(tris))


def sample_mesh_surface(mesh: TriangleMesh, n: int, rng) -> np.ndarray:
    """n points sampled uniformly by area on the mesh surface."""
    a, b, c = mesh.triangle_corners()
    areas = mesh.triangle_areas()
    probs = areas / areas.sum()
    pick = rng.choice(len(areas), size=n, p=probs)
    u = rng.random(n)
    v = rng.random(n)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]
    pa, pb, pc = a[pick], b[pick], c[pick]
    return pa + u[:, None] * (pb - pa) + v[:, None] * (pc - pa)


def make_plant_asset(asset_id: str, stage: str, seed: int, n_points: int = 480) -> PlantAsset:
    """One randomized toy plant (stem + canopy shell + hidden inner shell)."""
    rng = np.random.default_rng(seed)
    height = rng.uniform(0.22, 0.40)
    rx = rng.uniform(0.10, 0.16)
    ry = rng.uniform(0.10, 0.16)
    rz = rng.uniform(0.07, 0.12)
    stem_r = 0.012

    sphere = uv_sphere()
    canopy = transform_mesh(sphere, (rx, ry, rz), (0.0, 0.0, height))
    inner = transform_mesh(sphere, (0.5 * rx, 0.5 * ry, 0.5 * rz), (0.0, 0.0, height))
    stem = tube(stem_r, 0.0, height - 0.5 * rz)

    n_stem = max(1, int(0.15 * n_points))
    n_inner = max(1, int(0.30 * n_points))
    n_canopy = n_points - n_stem - n_inner
    pts = np.concatenate([
        sample_mesh_surface(canopy, n_canopy, rng),
        sample_mesh_surface(inner, n_inner, rng),
        sample_mesh_surface(stem, n_stem, rng),
    ])
    organ = np.concatenate([
        np.full(n_canopy + n_inner, ORGAN_SILIQUE, dtype=np.uint8),
        np.full(n_stem, ORGAN_STEM, dtype=np.uint8),
    ])
    cloud = PointCloud(pts, organ=organ)
    mesh = merge_meshes([canopy, inner, stem])
    return PlantAsset(cloud=cloud, mesh=mesh, stage=stage, asset_id=asset_id)


def make_asset_pool(count: int, seed: int, stage: str = "silique",
                    n_points: int = 480) -> list:
    return [
        make_plant_asset(f"toy_{stage}_{i:03d}", stage, seed=seed * 10007 + i, n_points=n_points)
        for i in range(count)
    ]
