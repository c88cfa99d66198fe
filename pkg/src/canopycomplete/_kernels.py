"""Numba-compiled hot loops: FPS, ray-triangle tests, BVH traversal,
occlusion classification, and the scatter-add used by autodiff gathers.

Everything here is deterministic; parallel loops only ever write to
disjoint per-point slots.
"""

import numpy as np
from numba import njit, prange

# Geometric determinant cutoff for Moller-Trumbore (parallel/degenerate
# triangles never block) and the absolute padding applied to BVH slabs so
# float rounding can never prune a true hit.
_DET_EPS = 1e-12
_BOX_PAD = 1e-9


@njit(cache=True)
def fps(points, m, seed_index):
    """Farthest point sampling; ties broken by lowest index."""
    n = points.shape[0]
    out = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    out[0] = seed_index
    last = seed_index
    for i in range(1, m):
        best = -1
        best_d = -1.0
        lx = points[last, 0]
        ly = points[last, 1]
        lz = points[last, 2]
        for j in range(n):
            dx = points[j, 0] - lx
            dy = points[j, 1] - ly
            dz = points[j, 2] - lz
            d = dx * dx + dy * dy + dz * dz
            if d < dist[j]:
                dist[j] = d
            if dist[j] > best_d:
                best_d = dist[j]
                best = j
        out[i] = best
        last = best
    return out


@njit(cache=True, inline="always")
def _ray_tri_t(ox, oy, oz, dx, dy, dz, v0, e1, e2, t_lo, t_hi):
    """Moller-Trumbore; boundary hits (u or v == 0) count. Returns the hit
    parameter in the open interval (t_lo, t_hi), else -1."""
    px = dy * e2[2] - dz * e2[1]
    py = dz * e2[0] - dx * e2[2]
    pz = dx * e2[1] - dy * e2[0]
    det = e1[0] * px + e1[1] * py + e1[2] * pz
    if det > -_DET_EPS and det < _DET_EPS:
        return -1.0
    inv = 1.0 / det
    tx = ox - v0[0]
    ty = oy - v0[1]
    tz = oz - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0
    qx = ty * e1[2] - tz * e1[1]
    qy = tz * e1[0] - tx * e1[2]
    qz = tx * e1[1] - ty * e1[0]
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0
    t = (e2[0] * qx + e2[1] * qy + e2[2] * qz) * inv
    if t <= t_lo or t >= t_hi:
        return -1.0
    return t


@njit(cache=True)
def ray_triangle(origin, direction, v0, e1, e2, t_lo, t_hi):
    return _ray_tri_t(
        origin[0], origin[1], origin[2],
        direction[0], direction[1], direction[2],
        v0, e1, e2, t_lo, t_hi,
    )


@njit(cache=True, inline="always")
def _slab_hit(ox, oy, oz, dx, dy, dz, bmin, bmax, t_lo, t_hi):
    """Conservative ray-box test over the t interval, padded slabs."""
    tmin = t_lo
    tmax = t_hi
    for a in range(3):
        if a == 0:
            o = ox
            d = dx
        elif a == 1:
            o = oy
            d = dy
        else:
            o = oz
            d = dz
        lo = bmin[a] - _BOX_PAD
        hi = bmax[a] + _BOX_PAD
        if d == 0.0:
            if o < lo or o > hi:
                return False
        else:
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tmin:
                tmin = t1
            if t2 < tmax:
                tmax = t2
            if tmin > tmax:
                return False
    return True


@njit(cache=True, inline="always")
def _bvh_any_hit(node_min, node_max, node_left, node_right, node_start,
                 node_count, tv0, te1, te2,
                 ox, oy, oz, dx, dy, dz, t_lo, t_hi):
    stack = np.empty(64, dtype=np.int64)
    top = 0
    stack[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(ox, oy, oz, dx, dy, dz, node_min[node], node_max[node], t_lo, t_hi):
            continue
        cnt = node_count[node]
        if cnt > 0:
            s = node_start[node]
            for i in range(s, s + cnt):
                if _ray_tri_t(ox, oy, oz, dx, dy, dz, tv0[i], te1[i], te2[i], t_lo, t_hi) >= 0.0:
                    return True
        else:
            stack[top] = node_left[node]
            top += 1
            stack[top] = node_right[node]
            top += 1
    return False


@njit(cache=True)
def bvh_all_hits(node_min, node_max, node_left, node_right, node_start,
                 node_count, tv0, te1, te2, origin, direction, t_lo, t_hi):
    """Slots (in BVH triangle order) of every triangle hit in (t_lo, t_hi)."""
    n_tri = tv0.shape[0]
    hits = np.empty(n_tri, dtype=np.int64)
    n_hits = 0
    stack = np.empty(64, dtype=np.int64)
    stack[0] = 0
    top = 1
    ox, oy, oz = origin[0], origin[1], origin[2]
    dx, dy, dz = direction[0], direction[1], direction[2]
    while top > 0:
        top -= 1
        node = stack[top]
        if not _slab_hit(ox, oy, oz, dx, dy, dz, node_min[node], node_max[node], t_lo, t_hi):
            continue
        cnt = node_count[node]
        if cnt > 0:
            s = node_start[node]
            for i in range(s, s + cnt):
                if _ray_tri_t(ox, oy, oz, dx, dy, dz, tv0[i], te1[i], te2[i], t_lo, t_hi) >= 0.0:
                    hits[n_hits] = i
                    n_hits += 1
        else:
            stack[top] = node_left[node]
            top += 1
            stack[top] = node_right[node]
            top += 1
    return hits[:n_hits]


@njit(cache=True, parallel=True)
def classify_bvh(points, cams, node_min, node_max, node_left, node_right,
                 node_start, node_count, tv0, te1, te2, self_eps):
    """Blocked-view count per point via BVH any-hit segment queries."""
    n = points.shape[0]
    n_cams = cams.shape[0]
    blocked = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        nb = 0
        for c in range(n_cams):
            vx = cams[c, 0] - px
            vy = cams[c, 1] - py
            vz = cams[c, 2] - pz
            dist = np.sqrt(vx * vx + vy * vy + vz * vz)
            if dist == 0.0:
                continue  # coincident camera sees the point
            dx = vx / dist
            dy = vy / dist
            dz = vz / dist
            if _bvh_any_hit(node_min, node_max, node_left, node_right,
                            node_start, node_count, tv0, te1, te2,
                            px, py, pz, dx, dy, dz, self_eps, dist - self_eps):
                nb += 1
        blocked[i] = nb
    return blocked


@njit(cache=True, parallel=True)
def classify_brute(points, cams, tv0, te1, te2, self_eps):
    """Blocked-view count per point by scanning every triangle for every
    point/camera pair (the reference triple loop, no early exit)."""
    n = points.shape[0]
    n_cams = cams.shape[0]
    n_tri = tv0.shape[0]
    blocked = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        nb = 0
        for c in range(n_cams):
            vx = cams[c, 0] - px
            vy = cams[c, 1] - py
            vz = cams[c, 2] - pz
            dist = np.sqrt(vx * vx + vy * vy + vz * vz)
            if dist == 0.0:
                continue
            dx = vx / dist
            dy = vy / dist
            dz = vz / dist
            n_int = 0
            for t in range(n_tri):
                if _ray_tri_t(px, py, pz, dx, dy, dz, tv0[t], te1[t], te2[t],
                              self_eps, dist - self_eps) >= 0.0:
                    n_int += 1
            if n_int > 0:
                nb += 1
        blocked[i] = nb
    return blocked


@njit(cache=True)
def scatter_add_rows(out, idx, grad):
    """out[idx[r]] += grad[r] for every row r (duplicate indices accumulate)."""
    r = idx.shape[0]
    d = out.shape[1]
    for i in range(r):
        j = idx[i]
        for c in range(d):
            out[j, c] += grad[i, c]
    return out
