"""Scene completion: block splitting and full-cloud inference.

The scene is divided into blocks on its bounding box (2x2x2 octants by
default), each block's surface points are normalized into the unit cube,
resampled to the network input size, run through the trained generator,
and the fine predictions are mapped back into world coordinates. The
completed cloud is the input plus all predictions, the latter flagged
synthetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import PointCloud, compute_aabb
from .network import generator_forward
from .popsim import fps_resample
from .training import (NORM_AABB_UNIT_CUBE, Checkpoint, denormalize_points,
                       normalization_params, normalize_points)


@dataclass(frozen=True)
class BlockFrame:
    """One block of the scene split: its cell box and point membership."""

    index: tuple
    cell_min: np.ndarray
    cell_max: np.ndarray
    point_indices: np.ndarray


def split_into_blocks(cloud, grid=(2, 2, 2)) -> list:
    """Partition a cloud into grid cells over its Aabb.

    Cells are half-open on internal boundaries (a point exactly on a
    boundary plane goes to the upper cell); points on the outer max face
    fall into the last cell. Every point lands in exactly one block;
    blocks may be empty.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("cannot split an empty cloud")
    grid = tuple(int(g) for g in grid)
    if len(grid) != 3 or any(g < 1 for g in grid):
        raise ValueError("grid must be three positive counts")
    box = compute_aabb(pts)
    extent = np.where(box.extent > 0, box.extent, 1.0)
    cell_size = extent / np.asarray(grid, dtype=np.float64)
    rel = (pts - box.min) / cell_size
    idx = np.floor(rel).astype(np.int64)
    idx = np.minimum(np.maximum(idx, 0), np.asarray(grid) - 1)

    blocks = []
    for ix in range(grid[0]):
        for iy in range(grid[1]):
            for iz in range(grid[2]):
                mask = (idx[:, 0] == ix) & (idx[:, 1] == iy) & (idx[:, 2] == iz)
                cell_min = box.min + np.array([ix, iy, iz]) * cell_size
                blocks.append(BlockFrame(
                    index=(ix, iy, iz),
                    cell_min=cell_min,
                    cell_max=cell_min + cell_size,
                    point_indices=np.flatnonzero(mask),
                ))
    return blocks


def complete_cloud(surface: PointCloud, ckpt: Checkpoint, grid=None,
                   min_block_points: int = 1) -> PointCloud:
    """Complete a surface cloud with the trained generator.

    Returns the union of the input points and the per-block fine
    predictions; the ``synthetic`` extra property is 0 for input points
    and 1 for predictions. Empty blocks are skipped.
    """
    if ckpt.norm_rule != NORM_AABB_UNIT_CUBE:
        raise ValueError(f"unsupported normalization rule {ckpt.norm_rule}")
    cfg = ckpt.config
    gw = ckpt.generator()
    grid = cfg.blocks if grid is None else grid

    predicted = []
    for block in split_into_blocks(surface, grid):
        if len(block.point_indices) < min_block_points:
            continue
        pts = surface.points[block.point_indices]
        offset, scale = normalization_params(pts)
        unit = normalize_points(pts, offset, scale)
        unit = unit[fps_resample(unit, cfg.n_in)]
        _, _, fine = generator_forward(unit, gw, cfg, training=False)
        predicted.append(denormalize_points(fine.data.astype(np.float64), offset, scale))

    n_in = len(surface)
    n_pred = sum(len(p) for p in predicted)
    points = np.concatenate([surface.points] + predicted) if predicted else surface.points.copy()
    synthetic = np.zeros(n_in + n_pred, dtype=np.uint8)
    synthetic[n_in:] = 1

    def padded(values, fill):
        if values is None:
            return None
        return np.concatenate([values, np.full(n_pred, fill, dtype=values.dtype)])

    extras = {name: padded(arr, 0) for name, arr in surface.extras.items()}
    extras["synthetic"] = synthetic
    return PointCloud(
        points=points,
        organ=padded(surface.organ, 4),          # predictions labeled "other"
        plant_id=padded(surface.plant_id, -1),
        occluded=padded(surface.occluded, 1),    # predictions stand in for occluded points
        extras=extras,
    )
