"""Volumetric canopy traits: silique layer partition, voxel volume, the
silique efficiency index (silique volume per unit plot ground area), and
the yield regression comparing complete against incomplete clouds."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geom import PointCloud, voxel_indices
from .metrics import ols_fit_r2
from .popsim import PlotLayout

ORGAN_SILIQUE = 0
LAYER_NAMES = ("lower", "middle", "upper")


def silique_mask(cloud: PointCloud) -> np.ndarray:
    if cloud.organ is None:
        raise ValueError("cloud has no organ labels")
    return cloud.organ == ORGAN_SILIQUE


@dataclass(frozen=True)
class LayerPartition:
    """Three vertical bands of equal height over the silique z-extent.

    Bands are half-open below their upper boundary; the top band is closed
    so the partition covers the full extent. A degenerate (zero-height)
    extent puts every point in the lower band.
    """

    z_min: float
    z_max: float

    @property
    def boundaries(self):
        h = (self.z_max - self.z_min) / 3.0
        return (self.z_min + h, self.z_min + 2.0 * h)

    def band_of(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        h = (self.z_max - self.z_min) / 3.0
        if h <= 0:
            return np.zeros(z.shape, dtype=np.int64)
        band = np.floor((z - self.z_min) / h).astype(np.int64)
        return np.clip(band, 0, 2)


def partition_layers(cloud: PointCloud) -> LayerPartition:
    """Equal-thirds split of the silique vertical extent."""
    mask = silique_mask(cloud)
    if not mask.any():
        raise ValueError("cloud has no silique points")
    z = cloud.points[mask, 2]
    return LayerPartition(z_min=float(z.min()), z_max=float(z.max()))


def percentile_partition(cloud: PointCloud, lower_pct: float = 100 / 3,
                         upper_pct: float = 200 / 3) -> tuple:
    """Alternative banding by silique z percentiles; returns boundary z's."""
    mask = silique_mask(cloud)
    if not mask.any():
        raise ValueError("cloud has no silique points")
    z = cloud.points[mask, 2]
    return (float(np.percentile(z, lower_pct)), float(np.percentile(z, upper_pct)))


def silique_volume(cloud: PointCloud, voxel_edge: float, band: int | None = None,
                   partition: LayerPartition | None = None) -> float:
    """Occupied-voxel volume of the silique points (optionally one band).

    The voxel grid is always anchored at the full silique set's Aabb min,
    so band volumes on aligned boundaries add up to the total exactly.
    """
    mask = silique_mask(cloud)
    if not mask.any():
        return 0.0
    pts = cloud.points[mask]
    origin = pts.min(axis=0)
    if band is not None:
        if partition is None:
            partition = partition_layers(cloud)
        pts = pts[partition.band_of(pts[:, 2]) == band]
        if len(pts) == 0:
            return 0.0
    idx = voxel_indices(pts, voxel_edge, origin)
    return len(np.unique(idx, axis=0)) * voxel_edge ** 3


def sei(cloud: PointCloud, plane_area: float, voxel_edge: float,
        band: int | None = None, partition: LayerPartition | None = None) -> float:
    """Silique efficiency index: silique voxel volume divided by the plot
    ground area (m^3 / m^2 = m)."""
    if plane_area <= 0:
        raise ValueError("plane area must be positive")
    if voxel_edge <= 0:
        raise ValueError("voxel edge must be positive")
    return silique_volume(cloud, voxel_edge, band=band, partition=partition) / plane_area


def plot_plane_area(layout: PlotLayout, margin: bool = True) -> float:
    """Ground footprint of the plot: grid extents, plus half a spacing of
    margin on each side when ``margin`` is set."""
    ex = (layout.cols - 1) * layout.plant_spacing
    ey = (layout.rows - 1) * layout.row_spacing
    if margin:
        ex += layout.plant_spacing
        ey += layout.row_spacing
    return float(ex * ey)


def hull_plane_area(cloud: PointCloud) -> float:
    """Convex hull area of the cloud's ground (xy) projection."""
    from scipy.spatial import ConvexHull

    xy = cloud.points[:, :2]
    if len(xy) < 3:
        raise ValueError("need at least 3 points for a hull area")
    return float(ConvexHull(xy).volume)  # 2-d hull "volume" is the area


@dataclass
class TraitReport:
    """Per-plot silique volumetry: total and per-layer volumes and SEI."""

    cloud_id: str
    variant: str
    plane_area: float
    voxel_edge: float
    volume_total: float
    volume_layers: dict
    sei_total: float
    sei_layers: dict
    layer_boundaries: tuple

    def to_json(self) -> str:
        return json.dumps({
            "cloud_id": self.cloud_id,
            "variant": self.variant,
            "plane_area_m2": self.plane_area,
            "voxel_edge_m": self.voxel_edge,
            "volume_m3": {"total": self.volume_total, **self.volume_layers},
            "sei_m": {"total": self.sei_total, **self.sei_layers},
            "layer_boundaries_z": list(self.layer_boundaries),
        }, indent=2, sort_keys=True) + "\n"


def compute_trait_report(cloud: PointCloud, plane_area: float, voxel_edge: float,
                         cloud_id: str = "", variant: str = "complete") -> TraitReport:
    partition = partition_layers(cloud)
    vol_total = silique_volume(cloud, voxel_edge)
    vols = {name: silique_volume(cloud, voxel_edge, band=i, partition=partition)
            for i, name in enumerate(LAYER_NAMES)}
    return TraitReport(
        cloud_id=cloud_id, variant=variant,
        plane_area=plane_area, voxel_edge=voxel_edge,
        volume_total=vol_total, volume_layers=vols,
        sei_total=vol_total / plane_area,
        sei_layers={k: v / plane_area for k, v in vols.items()},
        layer_boundaries=partition.boundaries,
    )


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r2: float
    n: int


def yield_regression(records_by_variant: dict) -> dict:
    """OLS per variant over (SEI, measured yield) records."""
    out = {}
    for variant, records in records_by_variant.items():
        records = list(records)
        if len(records) < 3:
            raise ValueError(f"variant {variant!r} needs at least 3 records")
        x = np.array([r[0] for r in records], dtype=np.float64)
        y = np.array([r[1] for r in records], dtype=np.float64)
        slope, intercept, r2 = ols_fit_r2(x, y)
        out[variant] = RegressionResult(slope, intercept, r2, len(records))
    return out
