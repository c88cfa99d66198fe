"""Core geometric types and kernels.

Point clouds and triangle meshes are carried as dense numpy arrays
(float64 coordinates, one row per point/vertex). All operations here are
pure functions over immutable inputs; the acceleration structures (Bvh)
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

ORGAN_CLASSES = ("silique", "stem", "leaf", "flower", "other")


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (n, 3) coordinates, got shape {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("coordinates must be finite (no NaN/Inf)")
    return pts


@dataclass
class PointCloud:
    """A set of 3D points with optional per-point labels.

    Labels, when present, are parallel arrays with exactly one entry per
    point: ``organ`` (uint8 index into ORGAN_CLASSES), ``plant_id``
    (int32), ``occluded`` (uint8 flag). ``extras`` carries any additional
    per-point properties read from files so they survive a round-trip.
    """

    points: np.ndarray
    organ: np.ndarray | None = None
    plant_id: np.ndarray | None = None
    occluded: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = _as_points(self.points)
        n = len(self.points)
        if self.organ is not None:
            self.organ = np.asarray(self.organ, dtype=np.uint8)
            if self.organ.shape != (n,):
                raise ValueError("organ labels must have one entry per point")
        if self.plant_id is not None:
            self.plant_id = np.asarray(self.plant_id, dtype=np.int32)
            if self.plant_id.shape != (n,):
                raise ValueError("plant_id labels must have one entry per point")
        if self.occluded is not None:
            self.occluded = np.asarray(self.occluded, dtype=np.uint8)
            if self.occluded.shape != (n,):
                raise ValueError("occluded flags must have one entry per point")
        for name, arr in self.extras.items():
            if len(arr) != n:
                raise ValueError(f"extra property {name!r} must have one entry per point")

    def __len__(self):
        return len(self.points)

    def select(self, index) -> "PointCloud":
        """Sub-cloud at the given indices/mask, labels carried along."""
        return PointCloud(
            points=self.points[index],
            organ=None if self.organ is None else self.organ[index],
            plant_id=None if self.plant_id is None else self.plant_id[index],
            occluded=None if self.occluded is None else self.occluded[index],
            extras={k: v[index] for k, v in self.extras.items()},
        )

    def translated(self, offset) -> "PointCloud":
        off = np.asarray(offset, dtype=np.float64).reshape(3)
        return PointCloud(
            points=self.points + off,
            organ=self.organ,
            plant_id=self.plant_id,
            occluded=self.occluded,
            extras=dict(self.extras),
        )


@dataclass
class TriangleMesh:
    """Triangle mesh: (V, 3) float vertices and (T, 3) int vertex indices."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = _as_points(self.vertices)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (t, 3) indices, got {self.triangles.shape}")
        if len(self.triangles) and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")
        if len(self.triangles) and self.triangles.min() < 0:
            raise ValueError("triangle index negative")

    def __len__(self):
        return len(self.triangles)

    def triangle_corners(self):
        """(T, 3) arrays of the three corner positions."""
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_areas(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def validate(self, min_area=1e-12):
        """Reject degenerate triangles (area <= min_area in m^2)."""
        if len(self.triangles) == 0:
            raise ValueError("mesh has no triangles")
        areas = self.triangle_areas()
        if (areas <= min_area).any():
            bad = int(np.argmax(areas <= min_area))
            raise ValueError(f"degenerate triangle at index {bad} (area {areas[bad]:.3e} m^2)")

    def translated(self, offset) -> "TriangleMesh":
        off = np.asarray(offset, dtype=np.float64).reshape(3)
        return TriangleMesh(self.vertices + off, self.triangles)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, min <= max componentwise."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64).reshape(3))
        if (self.min > self.max).any():
            raise ValueError("Aabb min must be <= max componentwise")

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def base_center(self) -> np.ndarray:
        """Center of the bottom (min-z) face."""
        c = self.center
        return np.array([c[0], c[1], self.min[2]])

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return ((pts >= self.min) & (pts <= self.max)).all(axis=1)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))


def compute_aabb(cloud) -> Aabb:
    """Tight componentwise bounding box of a cloud (or raw (n, 3) array)."""
    pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    if len(pts) == 0:
        raise ValueError("cannot compute Aabb of an empty cloud")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def mesh_aabb(mesh: TriangleMesh) -> Aabb:
    if len(mesh.vertices) == 0:
        raise ValueError("cannot compute Aabb of an empty mesh")
    return Aabb(mesh.vertices.min(axis=0), mesh.vertices.max(axis=0))


def fps_seed_index(points) -> int:
    """Index of the lexicographically smallest (x, y, z) point.

    Used to seed farthest point sampling wherever a caller wants a
    permutation-invariant, fully deterministic subsample.
    """
    pts = np.asarray(points, dtype=np.float64)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return int(order[0])


def fps_sample(cloud, m: int, seed_index: int = 0) -> np.ndarray:
    """Iterative farthest point sampling.

    Greedily selects m distinct indices: the first is seed_index, each
    subsequent pick maximizes the minimum Euclidean distance to all points
    already selected, ties broken by lowest index.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(pts)
    if n == 0:
        raise ValueError("cannot sample from an empty cloud")
    if not 1 <= m <= n:
        raise ValueError(f"requested {m} samples from {n} points")
    if not 0 <= seed_index < n:
        raise ValueError(f"seed_index {seed_index} out of range for {n} points")
    return _kernels.fps(np.ascontiguousarray(pts), m, seed_index)


def knn(features, k: int) -> np.ndarray:
    """Exact k-nearest neighbors by Euclidean distance, self excluded.

    Works on feature vectors of any dimension. Returns an (n, k) index
    array, per row sorted by ascending distance with ties broken by
    lowest index.
    """
    feats = np.asarray(features)
    if feats.dtype != np.float32:
        feats = feats.astype(np.float64, copy=False)
    if feats.ndim != 2:
        raise ValueError(f"expected (n, d) feature matrix, got shape {feats.shape}")
    n = len(feats)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the item count {n}")

    out = np.empty((n, k), dtype=np.int64)
    sq = np.einsum("ij,ij->i", feats, feats)
    chunk = max(1, int(4e6) // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (feats[start:stop] @ feats.T)
        np.maximum(d2, 0.0, out=d2)
        rows = np.arange(stop - start)
        d2[rows, np.arange(start, stop)] = np.inf
        if k + 1 >= n:
            order = np.argsort(d2, axis=1, kind="stable")
            out[start:stop] = order[:, :k]
            continue
        # fast path: select k+1 candidates and sort only those by
        # (distance, index). When the (k+1)-th candidate distance strictly
        # exceeds the k-th, the partition guarantee puts every index tied
        # at or below the k-th distance inside the candidate set, so the
        # result is exact; a boundary tie falls back to the full sort.
        cand = np.sort(np.argpartition(d2, k, axis=1)[:, :k + 1], axis=1)
        cand_d = np.take_along_axis(d2, cand, axis=1)
        order = np.argsort(cand_d, axis=1, kind="stable")
        cand_sorted = np.take_along_axis(cand, order, axis=1)
        cand_d_sorted = np.take_along_axis(cand_d, order, axis=1)
        out[start:stop] = cand_sorted[:, :k]
        for r in np.flatnonzero(cand_d_sorted[:, k] == cand_d_sorted[:, k - 1]):
            out[start + r] = np.argsort(d2[r], kind="stable")[:k]
    return out


@dataclass(frozen=True)
class Bvh:
    """Flat BVH over mesh triangles (median split on the longest axis).

    Internal nodes carry child indices and an Aabb; leaves reference a
    contiguous range of ``tri_order``. Immutable after construction.
    """

    node_min: np.ndarray
    node_max: np.ndarray
    node_left: np.ndarray   # child index, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray  # leaf range into tri_order
    node_count: np.ndarray  # 0 for internal nodes
    tri_order: np.ndarray
    # per-triangle geometry in tri_order, ready for the traversal kernel
    tri_v0: np.ndarray
    tri_e1: np.ndarray
    tri_e2: np.ndarray

    @property
    def n_nodes(self):
        return len(self.node_left)


_LEAF_SIZE = 8


def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Build a median-split BVH (leaf size <= 8 triangles)."""
    n_tri = len(mesh.triangles)
    if n_tri == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    a, b, c = mesh.triangle_corners()
    tri_min = np.minimum(np.minimum(a, b), c)
    tri_max = np.maximum(np.maximum(a, b), c)
    centroids = (a + b + c) / 3.0

    node_min, node_max = [], []
    node_left, node_right = [], []
    node_start, node_count = [], []
    order = np.arange(n_tri)

    def new_node():
        node_min.append(None)
        node_max.append(None)
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(0)
        node_count.append(0)
        return len(node_left) - 1

    # iterative build; stack of (node_id, lo, hi) ranges over `order`
    root = new_node()
    stack = [(root, 0, n_tri)]
    while stack:
        node, lo, hi = stack.pop()
        idx = order[lo:hi]
        bmin = tri_min[idx].min(axis=0)
        bmax = tri_max[idx].max(axis=0)
        node_min[node] = bmin
        node_max[node] = bmax
        if hi - lo <= _LEAF_SIZE:
            node_start[node] = lo
            node_count[node] = hi - lo
            continue
        axis = int(np.argmax(bmax - bmin))
        mid = (lo + hi) // 2
        # median split by centroid along the longest axis; index as the
        # secondary key keeps the ordering fully deterministic
        keys = np.lexsort((idx, centroids[idx, axis]))
        order[lo:hi] = idx[keys]
        left = new_node()
        right = new_node()
        node_left[node] = left
        node_right[node] = right
        stack.append((left, lo, mid))
        stack.append((right, mid, hi))

    order = np.ascontiguousarray(order)
    v0 = np.ascontiguousarray(a[order])
    e1 = np.ascontiguousarray(b[order] - a[order])
    e2 = np.ascontiguousarray(c[order] - a[order])
    return Bvh(
        node_min=np.ascontiguousarray(np.array(node_min, dtype=np.float64)),
        node_max=np.ascontiguousarray(np.array(node_max, dtype=np.float64)),
        node_left=np.array(node_left, dtype=np.int64),
        node_right=np.array(node_right, dtype=np.int64),
        node_start=np.array(node_start, dtype=np.int64),
        node_count=np.array(node_count, dtype=np.int64),
        tri_order=order,
        tri_v0=v0,
        tri_e1=e1,
        tri_e2=e2,
    )


def bvh_ray_hits(bvh: Bvh, origin, direction, t_min: float, t_max: float) -> list:
    """All triangle indices hit by the ray with t in (t_min, t_max).

    Exact same hit test as the brute-force scan; used to verify the tree.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(3)
    direction = np.asarray(direction, dtype=np.float64).reshape(3)
    hits = _kernels.bvh_all_hits(
        bvh.node_min, bvh.node_max, bvh.node_left, bvh.node_right,
        bvh.node_start, bvh.node_count, bvh.tri_v0, bvh.tri_e1, bvh.tri_e2,
        origin, direction, t_min, t_max,
    )
    return sorted(int(bvh.tri_order[h]) for h in hits)


def voxel_indices(points, edge: float, origin=None) -> np.ndarray:
    """Half-open voxel index of each point: origin + i*edge <= p < origin + (i+1)*edge.

    The floor of (p - origin)/edge is corrected against the float-evaluated
    voxel boundaries so the half-open rule holds exactly even when the
    division rounds across a boundary.
    """
    pts = np.asarray(points, dtype=np.float64)
    if not np.isfinite(edge) or edge <= 0:
        raise ValueError("voxel edge must be positive and finite")
    if origin is None:
        origin = pts.min(axis=0)
    origin = np.asarray(origin, dtype=np.float64)
    rel = pts - origin
    idx = np.floor(rel / edge).astype(np.int64)
    idx[rel < (idx * edge)] -= 1
    idx[rel >= ((idx + 1) * edge)] += 1
    return idx


class VoxelGrid:
    """Occupancy grid: a voxel is occupied iff >= 1 point falls in its cube."""

    def __init__(self, cloud, edge: float, origin=None):
        pts = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
        if len(pts) == 0:
            raise ValueError("cannot voxelize an empty cloud")
        if origin is None:
            origin = pts.min(axis=0)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(3)
        self.edge = float(edge)
        idx = voxel_indices(pts, self.edge, self.origin)
        self.occupied = set(map(tuple, idx.tolist()))

    @property
    def n_occupied(self) -> int:
        return len(self.occupied)

    def volume(self) -> float:
        return self.n_occupied * self.edge ** 3


def voxel_volume(cloud, edge: float, origin=None) -> float:
    """Occupied-voxel volume in m^3, grid anchored at the cloud Aabb min
    unless an explicit origin is given."""
    return VoxelGrid(cloud, edge, origin=origin).volume()
