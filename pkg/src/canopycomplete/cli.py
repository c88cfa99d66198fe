"""Command-line surface binding the pipeline together.

Subcommands: simulate, occlude, dataset, train, complete, eval, sei,
regress, gradcheck. Exit codes: 0 success, 1 usage error, 2 data or
validation error. Diagnostics go to stderr, machine output to stdout.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import DataFileError, NoOccludedPoints, TrainingDiverged
from .geom import compute_aabb
from .inference import complete_cloud
from .metrics import Ssim3dConfig, best_match_ssim, chamfer_rms, chamfer_sq, ssim3d
from .obj import load_obj, save_obj
from .occlusion import classify_scene, label_cloud, ring_cameras
from .ply import load_ply, save_ply
from .popsim import (DatasetManifest, assemble_population, build_dataset,
                     derive_seed)
from .synthetic import make_asset_pool
from .traits import compute_trait_report, hull_plane_area, plot_plane_area, yield_regression
from .training import TrainConfig, load_checkpoint, save_checkpoint, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _rig_for_cloud(cloud, cam_cfg):
    box = compute_aabb(cloud)
    center = np.array([box.center[0], box.center[1], box.min[2]])
    return ring_cameras(center, cam_cfg.distance, cam_cfg.elevation_deg, cam_cfg.count)


def _load_assets_dir(assets_dir):
    from .popsim import STAGES, PlantAsset

    root = Path(assets_dir)
    assets = []
    for stage in STAGES:
        stage_dir = root / stage
        if not stage_dir.is_dir():
            continue
        for ply_path in sorted(stage_dir.glob("*.ply")):
            obj_path = ply_path.with_suffix(".obj")
            if not obj_path.exists():
                raise DataFileError(obj_path, "missing mesh for asset cloud")
            assets.append(PlantAsset(
                cloud=load_ply(ply_path), mesh=load_obj(obj_path),
                stage=stage, asset_id=ply_path.stem,
            ))
    if not assets:
        raise DataFileError(root, "no assets found (expected <stage>/<id>.ply + .obj)")
    return assets


def _resolve_assets(args, cfg: RunConfig):
    if args.synthetic:
        pool = []
        stages = [s for s, c in sorted(cfg.dataset.count_per_stage.items()) if c > 0]
        for stage in stages or ["silique"]:
            pool.extend(make_asset_pool(args.synthetic, seed=cfg.seed, stage=stage))
        return pool
    if not args.assets:
        raise DataFileError("<cli>", "either --assets or --synthetic is required")
    return _load_assets_dir(args.assets)


def cmd_simulate(args, cfg: RunConfig) -> int:
    assets = _resolve_assets(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(args.count):
        seed = derive_seed(cfg.seed, i)
        scene = assemble_population(assets, args.stage, cfg.layout, seed,
                                    rotate_yaw=cfg.dataset.rotate_yaw)
        cloud_path = out / f"scene_{i:04d}.ply"
        mesh_path = out / f"scene_{i:04d}.obj"
        save_ply(cloud_path, scene.cloud, binary=True)
        save_obj(mesh_path, scene.mesh)
        written.append({"cloud": str(cloud_path), "mesh": str(mesh_path), "seed": seed})
    print(json.dumps({"scenes": written}, indent=2))
    return 0


def cmd_occlude(args, cfg: RunConfig) -> int:
    cloud = load_ply(args.cloud)
    mesh = load_obj(args.mesh)
    rig = _rig_for_cloud(cloud, cfg.camera)
    labels = classify_scene(cloud, mesh, rig, self_eps=cfg.occlusion.self_eps)
    save_ply(args.out, label_cloud(cloud, labels), binary=True)
    print(json.dumps({
        "points": len(cloud),
        "surface": int(labels.surface.sum()),
        "occluded": int(labels.occluded.sum()),
        "out": str(args.out),
    }, indent=2))
    return 0


def cmd_dataset(args, cfg: RunConfig) -> int:
    assets = _resolve_assets(args, cfg)
    counts = {s: c for s, c in cfg.dataset.count_per_stage.items() if c > 0}
    from .popsim import grid_positions

    grid = grid_positions(cfg.layout)
    center = np.array([grid[:, 0].mean(), grid[:, 1].mean(), 0.0])
    rig = ring_cameras(center, cfg.camera.distance, cfg.camera.elevation_deg, cfg.camera.count)
    manifest = build_dataset(
        assets, counts, cfg.layout, rig,
        n_in=cfg.network.n_in, m_out=cfg.network.m_out,
        split_fraction=cfg.dataset.split_fraction, seed=cfg.seed,
        out_dir=args.out, rotate_yaw=cfg.dataset.rotate_yaw,
        self_eps=cfg.occlusion.self_eps,
    )
    print(json.dumps({
        "manifest": str(Path(args.out) / "manifest.json"),
        "train": manifest.n_train, "val": manifest.n_val,
    }, indent=2))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = DatasetManifest.load(args.manifest)
    base_dir = Path(args.manifest).parent
    tc = cfg.train if args.seed is None else TrainConfig(
        **{**cfg.train.to_dict(), "seed": args.seed})
    result = train(manifest, base_dir, cfg.network, tc, log_path=args.log)
    save_checkpoint(args.out, result.checkpoint)
    print(json.dumps({
        "checkpoint": str(args.out),
        "epochs_run": result.epochs_run,
        "best_val_cd": result.best_val_cd,
        "final_train_loss": result.history[-1]["total"] if result.history else None,
    }, indent=2))
    return 0


def cmd_complete(args, cfg: RunConfig) -> int:
    cloud = load_ply(args.input)
    ckpt = load_checkpoint(args.checkpoint)
    grid = None
    if args.grid:
        grid = tuple(int(g) for g in args.grid.split(","))
    completed = complete_cloud(cloud, ckpt, grid=grid)
    save_ply(args.out, completed, binary=True)
    n_pred = int(completed.extras["synthetic"].sum())
    print(json.dumps({
        "input_points": len(cloud),
        "predicted_points": n_pred,
        "out": str(args.out),
    }, indent=2))
    return 0


def _surface_only(cloud):
    if cloud.occluded is None:
        return cloud
    return cloud.select(cloud.occluded == 0)


def cmd_eval(args, cfg: RunConfig) -> int:
    target = load_ply(args.target)
    ssim_cfg = Ssim3dConfig(k=args.ssim_k)
    if args.best_of:
        paths = sorted(glob.glob(args.best_of))
        if not paths:
            raise DataFileError(args.best_of, "no simulated clouds match the pattern")
        sims = [_surface_only(load_ply(p)) for p in paths]
        idx, score = best_match_ssim(target, sims, ssim_cfg)
        print(json.dumps({"best_index": idx, "best_path": paths[idx],
                          "best_ssim3d": score, "n_sims": len(paths)}, indent=2))
        return 0
    if not args.pred:
        raise DataFileError("<cli>", "eval needs either --pred or --best-of")
    pred = load_ply(args.pred)
    print(json.dumps({
        "cd_sq": chamfer_sq(pred, target),
        "cd_rms": chamfer_rms(pred, target),
        "ssim3d": ssim3d(pred, target, ssim_cfg),
    }, indent=2))
    return 0


def cmd_sei(args, cfg: RunConfig) -> int:
    cloud = load_ply(args.cloud)
    if cfg.sei.plane_area is not None:
        area = cfg.sei.plane_area
    elif cfg.sei.plane_area_mode == "hull":
        area = hull_plane_area(cloud)
    else:
        area = plot_plane_area(cfg.layout)
    report = compute_trait_report(cloud, area, cfg.sei.voxel_edge,
                                  cloud_id=args.id or Path(args.cloud).stem,
                                  variant=args.variant)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def _read_regress_csv(path):
    records = {}
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or not {"variant", "sei", "yield"} <= set(reader.fieldnames):
                raise DataFileError(path, "regression CSV needs columns: variant, sei, yield")
            for ln, row in enumerate(reader, start=2):
                try:
                    records.setdefault(row["variant"], []).append(
                        (float(row["sei"]), float(row["yield"])))
                except (TypeError, ValueError):
                    raise DataFileError(path, f"non-numeric record {row!r}", line=ln)
    except OSError as e:
        raise DataFileError(path, f"cannot read: {e.strerror}")
    return records


def scatter_svg(records_by_variant, fits, width=480, height=360) -> str:
    """Minimal SVG scatter of (SEI, yield) records with fitted lines."""
    pts = [p for rec in records_by_variant.values() for p in rec]
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xr = (x1 - x0) or 1.0
    yr = (y1 - y0) or 1.0
    pad = 40

    def sx(x):
        return pad + (x - x0) / xr * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / yr * (height - 2 * pad)

    colors = ["#1b7837", "#d95f02", "#7570b3", "#e7298a"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.1f}" y="{height - 8}" font-size="12" text-anchor="middle">SEI (m)</text>',
             f'<text x="12" y="{height / 2:.1f}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {height / 2:.1f})">yield</text>']
    for i, (variant, rec) in enumerate(sorted(records_by_variant.items())):
        color = colors[i % len(colors)]
        for x, y in rec:
            parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="3" fill="{color}" fill-opacity="0.7"/>')
        fit = fits[variant]
        ya, yb = fit.slope * x0 + fit.intercept, fit.slope * x1 + fit.intercept
        parts.append(f'<line x1="{sx(x0):.2f}" y1="{sy(ya):.2f}" x2="{sx(x1):.2f}" y2="{sy(yb):.2f}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" font-size="11" text-anchor="end" '
                     f'fill="{color}">{variant}: R&#178;={fit.r2:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_regress(args, cfg: RunConfig) -> int:
    records = _read_regress_csv(args.records)
    fits = yield_regression(records)
    writer = csv.writer(sys.stdout)
    writer.writerow(["variant", "slope", "intercept", "r2", "n"])
    for variant in sorted(fits):
        f = fits[variant]
        writer.writerow([variant, f"{f.slope:.8g}", f"{f.intercept:.8g}", f"{f.r2:.8g}", f.n])
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "slope", "intercept", "r2", "n"])
            for variant in sorted(fits):
                f = fits[variant]
                w.writerow([variant, f"{f.slope:.8g}", f"{f.intercept:.8g}", f"{f.r2:.8g}", f.n])
    if args.svg:
        Path(args.svg).write_text(scatter_svg(records, fits))
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import run_all

    results, ok = run_all()
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status} {r.name}: max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e}")
    return 0 if ok else 2


def build_parser() -> _Parser:
    parser = _Parser(prog="canopycomplete",
                     description="Occluded crop population point cloud completion pipeline")
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--threads", type=int, help="worker threads for classification kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="assemble population scenes from plant assets")
    p.add_argument("--assets", help="asset directory (<stage>/<id>.ply + .obj)")
    p.add_argument("--synthetic", type=int, default=0, metavar="POOL",
                   help="use a synthetic asset pool of this size instead")
    p.add_argument("--stage", default="silique")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("occlude", help="label a scene cloud surface/occluded")
    p.add_argument("--cloud", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_occlude)

    p = sub.add_parser("dataset", help="generate a completion training dataset")
    p.add_argument("--assets")
    p.add_argument("--synthetic", type=int, default=0, metavar="POOL")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_dataset)

    p = sub.add_parser("train", help="train the completion network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training CSV log path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("complete", help="complete a surface cloud with a checkpoint")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", help="block grid, e.g. 2,2,2")
    p.set_defaults(fn=cmd_complete)

    p = sub.add_parser("eval", help="compare clouds (chamfer + ssim3d)")
    p.add_argument("target", help="reference cloud")
    p.add_argument("--pred", help="cloud to score against the reference")
    p.add_argument("--best-of", dest="best_of", metavar="GLOB",
                   help="pick the best-matching simulated cloud")
    p.add_argument("--ssim-k", type=int, default=10)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sei", help="silique efficiency report for a labeled cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", help="write the JSON report here as well")
    p.add_argument("--variant", default="complete")
    p.add_argument("--id", default="")
    p.set_defaults(fn=cmd_sei)

    p = sub.add_parser("regress", help="SEI-vs-yield regression summary")
    p.add_argument("--records", required=True, help="CSV with variant, sei, yield columns")
    p.add_argument("--out-csv", dest="out_csv")
    p.add_argument("--svg")
    p.set_defaults(fn=cmd_regress)

    p = sub.add_parser("gradcheck", help="verify autodiff against finite differences")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            from dataclasses import replace

            cfg = replace(cfg, seed=args.seed)
        if args.threads is not None or cfg.threads is not None:
            import numba

            numba.set_num_threads(args.threads or cfg.threads)
        return args.fn(args, cfg)
    except (DataFileError, NoOccludedPoints, TrainingDiverged, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
