"""Virtual population assembly and completion-sample generation.

Builds plot-scale scenes by placing single-plant assets on the planting
grid, labels them with ray-traced occlusion, and emits fixed-size
(surface input, occluded target) training samples plus a JSON manifest.
Everything is driven by explicit seeds: (pool, layout, seed) fully
determines every scene, sample, and split.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFileError, NoOccludedPoints
from .geom import (Aabb, PointCloud, TriangleMesh, compute_aabb, fps_sample,
                   fps_seed_index, mesh_aabb)
from .occlusion import CameraRig, classify_scene, label_cloud

STAGES = ("seedling", "bolting", "flowering", "silique")


@dataclass
class PlantAsset:
    """One plant: its sampled point cloud, triangle mesh, growth stage, id."""

    cloud: PointCloud
    mesh: TriangleMesh
    stage: str
    asset_id: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        box = self.aabb()
        grown = Aabb(box.min - 0.01, box.max + 0.01)
        if not grown.contains(self.cloud.points).all():
            raise ValueError(f"asset {self.asset_id}: cloud extends past the mesh box by > 1 cm")

    def aabb(self) -> Aabb:
        return mesh_aabb(self.mesh).union(compute_aabb(self.cloud))


@dataclass(frozen=True)
class PlotLayout:
    rows: int = 4
    cols: int = 4
    row_spacing: float = 0.28
    plant_spacing: float = 0.25

    def __post_init__(self):
        if self.rows * self.cols < 1:
            raise ValueError("layout needs at least one slot")
        if self.row_spacing <= 0 or self.plant_spacing <= 0:
            raise ValueError("spacings must be positive")

    @property
    def n_slots(self) -> int:
        return self.rows * self.cols


def grid_positions(layout: PlotLayout) -> np.ndarray:
    """Ground anchors (z=0) in row-major order: (col*plant_spacing,
    row*row_spacing, 0)."""
    pos = np.zeros((layout.n_slots, 3))
    for r in range(layout.rows):
        for c in range(layout.cols):
            pos[r * layout.cols + c, 0] = c * layout.plant_spacing
            pos[r * layout.cols + c, 1] = r * layout.row_spacing
    return pos


def anchor_plant(asset: PlantAsset, target) -> PlantAsset:
    """Rigid translation landing the center of the asset's bounding-box
    bottom face on the target."""
    target = np.asarray(target, dtype=np.float64).reshape(3)
    offset = target - asset.aabb().base_center()
    return PlantAsset(
        cloud=asset.cloud.translated(offset),
        mesh=asset.mesh.translated(offset),
        stage=asset.stage,
        asset_id=asset.asset_id,
    )


def _rotate_yaw(asset: PlantAsset, yaw: float) -> PlantAsset:
    """Rotate about the vertical axis through the asset's base center."""
    pivot = asset.aabb().base_center()
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def apply(pts):
        return (pts - pivot) @ rot.T + pivot

    cloud = PointCloud(apply(asset.cloud.points), organ=asset.cloud.organ,
                       plant_id=asset.cloud.plant_id, occluded=asset.cloud.occluded,
                       extras=dict(asset.cloud.extras))
    mesh = TriangleMesh(apply(asset.mesh.vertices), asset.mesh.triangles)
    return PlantAsset(cloud, mesh, asset.stage, asset.asset_id)


@dataclass
class PopulationScene:
    """A merged plot: cloud with per-point plant ids, merged mesh,
    originating layout/slot assignment, and the seed that produced it."""

    cloud: PointCloud
    mesh: TriangleMesh
    layout: PlotLayout
    slot_asset_ids: list
    seed: int
    stage: str

    def __post_init__(self):
        if len(self.slot_asset_ids) != self.layout.n_slots:
            raise ValueError("one asset id per slot required")


def _merge(placed: list) -> tuple[PointCloud, TriangleMesh]:
    clouds, verts, tris = [], [], []
    organ_parts, v_off = [], 0
    any_organ = any(a.cloud.organ is not None for a in placed)
    for pid, asset in enumerate(placed):
        clouds.append(asset.cloud.points)
        n = len(asset.cloud)
        organ_parts.append(
            asset.cloud.organ if asset.cloud.organ is not None else np.full(n, 4, dtype=np.uint8)
        )
        verts.append(asset.mesh.vertices)
        tris.append(asset.mesh.triangles + v_off)
        v_off += len(asset.mesh.vertices)
    points = np.concatenate(clouds)
    plant_id = np.concatenate(
        [np.full(len(a.cloud), i, dtype=np.int32) for i, a in enumerate(placed)]
    )
    cloud = PointCloud(
        points,
        organ=np.concatenate(organ_parts) if any_organ else None,
        plant_id=plant_id,
    )
    mesh = TriangleMesh(np.concatenate(verts), np.concatenate(tris))
    return cloud, mesh


def assemble_population(assets, stage: str, layout: PlotLayout, seed: int,
                        rotate_yaw: bool = False) -> PopulationScene:
    """Fill every grid slot by sampling the stage-filtered pool uniformly
    with replacement (seeded), anchoring each pick to its grid position."""
    pool = [a for a in assets if a.stage == stage]
    if not pool:
        raise ValueError(f"no assets available for stage {stage!r}")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(pool), size=layout.n_slots)
    yaws = rng.uniform(0.0, 2.0 * np.pi, size=layout.n_slots) if rotate_yaw else None
    anchors = grid_positions(layout)
    placed = []
    for slot, pick in enumerate(picks):
        asset = pool[pick]
        if yaws is not None:
            asset = _rotate_yaw(asset, yaws[slot])
        placed.append(anchor_plant(asset, anchors[slot]))
    cloud, mesh = _merge(placed)
    return PopulationScene(
        cloud=cloud, mesh=mesh, layout=layout,
        slot_asset_ids=[pool[p].asset_id for p in picks],
        seed=int(seed), stage=stage,
    )


def assemble_recorded(assets, positions, layout: PlotLayout | None = None) -> PopulationScene:
    """Deterministic assembly of given assets at recorded positions
    (ground-truth plots); plant id i goes to position i."""
    assets = list(assets)
    positions = np.asarray(positions, dtype=np.float64)
    if len(assets) != len(positions):
        raise ValueError(f"{len(assets)} assets but {len(positions)} positions")
    placed = [anchor_plant(a, p) for a, p in zip(assets, positions)]
    cloud, mesh = _merge(placed)
    if layout is None:
        layout = PlotLayout(rows=1, cols=len(assets), row_spacing=1.0, plant_spacing=1.0)
    return PopulationScene(
        cloud=cloud, mesh=mesh, layout=layout,
        slot_asset_ids=[a.asset_id for a in assets],
        seed=0, stage=assets[0].stage if assets else "seedling",
    )


def fps_resample(points: np.ndarray, m: int) -> np.ndarray:
    """Indices of an exact-size FPS resample, padded cyclically when the
    class has fewer points than requested."""
    n = len(points)
    if n == 0:
        raise ValueError("cannot resample an empty point set")
    take = min(m, n)
    idx = fps_sample(points, take, seed_index=fps_seed_index(points))
    if take < m:
        reps = np.arange(m - take) % take
        idx = np.concatenate([idx, idx[reps]])
    return idx


@dataclass
class CompletionSample:
    """One training unit: a fixed-size surface input paired with the
    fixed-size occluded target, plus scene provenance."""

    surface: PointCloud
    occluded: PointCloud
    n_in: int
    m_out: int
    seed: int
    stage: str
    slot_asset_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.surface) != self.n_in:
            raise ValueError("surface cloud is not at the requested input size")
        if len(self.occluded) != self.m_out:
            raise ValueError("occluded cloud is not at the requested output size")


def make_sample(scene: PopulationScene, rig: CameraRig, n_in: int, m_out: int,
                seed: int = 0, self_eps: float = 1e-4) -> CompletionSample:
    """Occlusion-label the scene and resample each class to a fixed size.

    Raises NoOccludedPoints when nothing in the scene is occluded, a
    distinct signal so the caller can reassemble with another seed.
    """
    if n_in < 1 or m_out < 1:
        raise ValueError("sample sizes must be positive")
    labels = classify_scene(scene.cloud, scene.mesh, rig, self_eps=self_eps)
    if not labels.occluded.any():
        raise NoOccludedPoints(f"scene seed={scene.seed} has no occluded points")
    labeled = label_cloud(scene.cloud, labels)
    surface = labeled.select(labels.surface)
    hidden = labeled.select(labels.occluded)
    surface = surface.select(fps_resample(surface.points, n_in))
    hidden = hidden.select(fps_resample(hidden.points, m_out))
    return CompletionSample(
        surface=surface, occluded=hidden, n_in=n_in, m_out=m_out,
        seed=int(seed), stage=scene.stage, slot_asset_ids=list(scene.slot_asset_ids),
    )


@dataclass
class ManifestRecord:
    sample_id: str
    stage: str
    split: str
    surface_path: str
    occluded_path: str
    n_in: int
    m_out: int
    seed: int
    slot_asset_ids: list


@dataclass
class DatasetManifest:
    """Dataset index: per-sample records with relative file paths, the
    global seed, and the exact split fractions used."""

    records: list
    seed: int
    split_fraction: float
    format_version: int = 1

    @property
    def n_train(self) -> int:
        return sum(1 for r in self.records if r.split == "train")

    @property
    def n_val(self) -> int:
        return sum(1 for r in self.records if r.split == "val")

    def for_split(self, split: str) -> list:
        return [r for r in self.records if r.split == split]

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "seed": self.seed,
            "split_fraction": self.split_fraction,
            "counts": {"train": self.n_train, "val": self.n_val},
            "samples": [vars(r) for r in self.records],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_json())

    @classmethod
    def from_json(cls, text: str, path="<manifest>") -> "DatasetManifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataFileError(path, f"invalid JSON: {e.msg}", line=e.lineno)
        required = {"format_version", "seed", "split_fraction", "counts", "samples"}
        known = required
        for key in doc:
            if key not in known:
                raise DataFileError(path, f"unknown manifest key /{key}")
        missing = required - set(doc)
        if missing:
            raise DataFileError(path, f"missing manifest keys: {sorted(missing)}")
        rec_fields = {f for f in ManifestRecord.__dataclass_fields__}
        records = []
        for i, raw in enumerate(doc["samples"]):
            extra = set(raw) - rec_fields
            if extra:
                raise DataFileError(path, f"unknown sample key /samples/{i}/{sorted(extra)[0]}")
            missing = rec_fields - set(raw)
            if missing:
                raise DataFileError(path, f"sample /samples/{i} missing keys: {sorted(missing)}")
            records.append(ManifestRecord(**raw))
        manifest = cls(records=records, seed=doc["seed"],
                       split_fraction=doc["split_fraction"],
                       format_version=doc["format_version"])
        if doc["counts"] != {"train": manifest.n_train, "val": manifest.n_val}:
            raise DataFileError(path, "manifest counts do not match sample records")
        return manifest

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as e:
            raise DataFileError(p, f"cannot read manifest: {e.strerror}")
        return cls.from_json(text, path=p)


def derive_seed(global_seed: int, index: int) -> int:
    """Stable per-sample seed; parallel generation never changes outputs."""
    ss = np.random.SeedSequence(entropy=int(global_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split_counts(total: int, split_fraction: float) -> tuple[int, int]:
    """Train/val counts with fractional samples rounded toward train."""
    if not 0.0 <= split_fraction <= 1.0:
        raise ValueError("split fraction must be in [0, 1]")
    # round at 9 decimals first so 4000*(1-0.8) = 799.9999... floors to 800
    n_val = int(np.floor(round(total * (1.0 - split_fraction), 9)))
    return total - n_val, n_val


def build_dataset(assets, counts_per_stage: dict, layout: PlotLayout, rig: CameraRig,
                  n_in: int, m_out: int, split_fraction: float, seed: int, out_dir,
                  rotate_yaw: bool = False, self_eps: float = 1e-4,
                  max_retries: int = 25) -> DatasetManifest:
    """Generate, persist, and index a completion dataset.

    Samples are written as paired PLY files under out_dir; the split is
    assigned by a seeded shuffle with rounding toward train. Scenes with no
    occluded points are retried with derived sub-seeds.
    """
    from .ply import save_ply  # local import to keep codec deps one-way

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = [(stage, i) for stage in sorted(counts_per_stage) for i in range(counts_per_stage[stage])]
    total = len(plan)
    if total == 0:
        raise ValueError("requested zero samples")
    n_train, _ = split_counts(total, split_fraction)
    order = np.random.default_rng(derive_seed(seed, 0xC0FFEE)).permutation(total)
    split_of = np.full(total, "val", dtype=object)
    split_of[order[:n_train]] = "train"

    records = []
    for idx, (stage, _) in enumerate(plan):
        sample = None
        for attempt in range(max_retries):
            sample_seed = derive_seed(seed, idx * max_retries + attempt + 1)
            scene = assemble_population(assets, stage, layout, sample_seed, rotate_yaw=rotate_yaw)
            try:
                sample = make_sample(scene, rig, n_in, m_out, seed=sample_seed, self_eps=self_eps)
                break
            except NoOccludedPoints:
                continue
        if sample is None:
            raise NoOccludedPoints(
                f"no occluded points after {max_retries} attempts for sample {idx} ({stage})"
            )
        sample_id = f"{stage}_{idx:05d}"
        surface_path = f"{sample_id}_surface.ply"
        occluded_path = f"{sample_id}_occluded.ply"
        save_ply(out / surface_path, sample.surface, binary=True)
        save_ply(out / occluded_path, sample.occluded, binary=True)
        records.append(ManifestRecord(
            sample_id=sample_id, stage=stage, split=str(split_of[idx]),
            surface_path=surface_path, occluded_path=occluded_path,
            n_in=n_in, m_out=m_out, seed=sample.seed,
            slot_asset_ids=sample.slot_asset_ids,
        ))

    manifest = DatasetManifest(records=records, seed=int(seed), split_fraction=split_fraction)
    manifest.save(out / "manifest.json")
    return manifest
