"""Command-line entry points: fuse, eval, synth, sweep, info.

Exit codes: 0 success, 1 usage error, 2 data error (bad or missing input
files), 3 internal error. Reports are deterministic: identical inputs and
seeds produce byte-identical CSVs and meshes.
"""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import click
import numpy as np

from . import io as vio
from .errors import PredictorFaultError, VoxfuseError
from .fusion import ClassicPredictor, FusionConfig, fuse_frame
from .meshing import marching_cubes
from .metrics import (
    ReconReport,
    fscore,
    iou_per_class,
    labels_to_vertices,
    nearest_point_labels,
)
from .synth import apply_noise, bake_gt_volume, load_scene, render_depth, \
    trajectory, volume_config_for_scene, NoiseModel
from .volume import new_volume, snapshot_stats

WARMUP_FRAMES = 3  # excluded from FPS measurement

NOISE_PRESETS = {
    "none": None,
    "default": NoiseModel(gaussian_sigma=0.005, outlier_rate=0.005,
                          outlier_magnitude=0.1, dropout_rate=0.01, seed=0),
    "heavy": NoiseModel(gaussian_sigma=0.01, outlier_rate=0.01,
                        outlier_magnitude=0.1, dropout_rate=0.0, seed=0),
}


@click.group()
def cli():
    """Online TSDF + semantic fusion engine."""


def _load_dataset(dataset, config_path):
    root = Path(dataset)
    cfg_file = Path(config_path) if config_path else root / "config.yaml"
    if not cfg_file.is_file():
        raise FileNotFoundError(f"missing run config {cfg_file}")
    config = vio.load_run_config(cfg_file)
    records = vio.discover_frames(root)
    return config, records


def _run_fusion(config, records, semantics: bool, fps_report: bool):
    volume = new_volume(config.volume)
    predictor = ClassicPredictor(config.volume.truncation, config.volume.voxel_size)
    fusion_cfg = FusionConfig(
        window_size=config.window_size,
        outlier_weight_threshold=config.outlier_weight_threshold,
        semantics_enabled=semantics,
    )
    reports, skipped = [], 0
    for rec, depth, labels in vio.FrameStream(records, config):
        try:
            reports.append(fuse_frame(volume, depth, labels, config.intrinsics,
                                      rec.pose, predictor, fusion_cfg))
        except PredictorFaultError as e:
            skipped += 1
            click.echo(f"frame {rec.index}: skipped ({e})")
    if fps_report and len(reports) > WARMUP_FRAMES:
        steady = reports[WARMUP_FRAMES:]
        total = sum(r.elapsed for r in steady)
        click.echo(f"steady-state: {len(steady) / total:.1f} FPS over {len(steady)} frames")
        for stage in ("extract", "predict", "integrate", "semantic"):
            ms = 1000 * np.mean([r.stage_seconds[stage] for r in steady])
            click.echo(f"  {stage:<10} {ms:7.2f} ms/frame")
    return volume, reports, skipped


@cli.command("fuse")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False))
@click.option("-o", "--output", "mesh_path", required=True, type=click.Path(),
              help="Output mesh (PLY).")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Run config (default: DATASET/config.yaml).")
@click.option("--no-semantics", is_flag=True, help="Ignore label frames.")
@click.option("--filter", "filter_threshold", type=float, default=None,
              help="Outlier weight threshold (default: from config).")
@click.option("--checkpoint", type=click.Path(), help="Also write a volume checkpoint.")
@click.option("--fps-report", is_flag=True, help="Print per-stage timing and FPS.")
def cmd_fuse(dataset, mesh_path, config_path, no_semantics, filter_threshold,
             checkpoint, fps_report):
    """Fuse a frame stream into a labeled mesh."""
    config, records = _load_dataset(dataset, config_path)
    semantics = config.semantics_enabled and not no_semantics
    volume, reports, skipped = _run_fusion(config, records, semantics, fps_report)

    threshold = (filter_threshold if filter_threshold is not None
                 else config.outlier_weight_threshold)
    mesh = marching_cubes(volume, threshold)
    vio.write_mesh_ply(mesh, mesh_path)
    if checkpoint:
        vio.save_volume(volume, checkpoint)

    stats = snapshot_stats(volume)
    click.echo(
        f"fused {len(reports)}/{len(records)} frames ({skipped} skipped), "
        f"{stats.occupied_voxels} occupied / {stats.labeled_voxels} labeled voxels, "
        f"filter {threshold:g}: {len(mesh.vertices)} vertices, "
        f"{len(mesh.triangles)} triangles -> {mesh_path}"
    )


def _load_pred(path, filter_threshold: float):
    """A prediction is either a mesh (PLY) or a volume checkpoint (VXF1)."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"VXF1":
        volume = vio.load_volume(path)
        return marching_cubes(volume, filter_threshold), volume
    return vio.load_mesh_ply(path), None


@cli.command("eval")
@click.argument("pred", type=click.Path(exists=True, dir_okay=False))
@click.argument("gt", type=click.Path(exists=True, dir_okay=False))
@click.option("--threshold", type=float, default=0.01, show_default=True,
              help="F-score distance threshold in meters.")
@click.option("--iou", "with_iou", is_flag=True, help="Also evaluate per-class IoU.")
@click.option("--filter", "filter_threshold", type=float, default=0.0,
              help="Outlier filter when PRED is a checkpoint.")
@click.option("--iou-cutoff", type=float, default=None,
              help="Label transfer radius in meters (default 2 voxels).")
@click.option("--report-csv", type=click.Path(), help="Write the F-score row as CSV.")
@click.option("--iou-csv", type=click.Path(), help="Write the per-class IoU table as CSV.")
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_eval(pred, gt, threshold, with_iou, filter_threshold, iou_cutoff,
             report_csv, iou_csv, seed):
    """Score a reconstruction against ground truth."""
    pred_mesh, pred_volume = _load_pred(pred, filter_threshold)
    gt_mesh = vio.load_mesh_ply(gt)

    report = fscore(pred_mesh, gt_mesh, threshold=threshold, seed=seed)
    click.echo(
        f"precision {report.precision:.2f}  recall {report.recall:.2f}  "
        f"f1 {report.f1:.2f}  (threshold {threshold:g} m, "
        f"{report.n_pred_points}/{report.n_gt_points} samples)"
    )
    if report_csv:
        _write_csv(report_csv, ["threshold", "precision", "recall", "f1"],
                   [[f"{threshold:.6f}", f"{report.precision:.6f}",
                     f"{report.recall:.6f}", f"{report.f1:.6f}"]])

    if with_iou:
        if not np.any(gt_mesh.vertex_labels > 0):
            raise VoxfuseError("ground-truth mesh has no labeled vertices")
        if pred_volume is not None:
            cutoff = iou_cutoff if iou_cutoff is not None else \
                2.0 * pred_volume.config.voxel_size
            pred_labels = labels_to_vertices(pred_volume, gt_mesh.vertices, cutoff)
        else:
            cutoff = iou_cutoff if iou_cutoff is not None else 0.02
            src = pred_mesh.vertex_labels > 0
            pred_labels = nearest_point_labels(
                pred_mesh.vertices[src], pred_mesh.vertex_labels[src],
                gt_mesh.vertices, cutoff)
        iou = iou_per_class(pred_labels, gt_mesh.vertex_labels)
        support = np.bincount(gt_mesh.vertex_labels,
                              minlength=max(iou.per_class, default=0) + 1)
        rows = []
        for cls in sorted(iou.per_class):
            rows.append([str(cls), f"class_{cls}", f"{iou.per_class[cls]:.6f}",
                         str(int(support[cls]))])
            click.echo(f"class {cls:>3}  iou {iou.per_class[cls]:.4f}  "
                       f"support {int(support[cls])}")
        click.echo(f"mean iou {iou.mean_iou:.4f}")
        if iou_csv:
            _write_csv(iou_csv, ["class_id", "class_name", "iou", "support"], rows)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


@cli.command("synth")
@click.argument("scene_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--frames", type=int, default=None, help="Override the trajectory length.")
@click.option("--noise", "noise_preset", type=click.Choice([*NOISE_PRESETS, "scene"]),
              default="scene", show_default=True,
              help="Noise preset; 'scene' uses the scene file's noise section.")
@click.option("--seed", type=int, default=None, help="Override the noise seed.")
def cmd_synth(scene_file, out_dir, frames, noise_preset, seed):
    """Render a synthetic dataset (depth, labels, scores, poses, config, GT)."""
    spec = load_scene(scene_file)
    scene, intrinsics = spec["scene"], spec["intrinsics"]
    poses = spec["trajectory"]
    if frames is not None:
        if frames < 1:
            raise click.UsageError("--frames must be >= 1")
        # regenerate the same trajectory with the requested length
        traj_spec = dict(spec["trajectory_spec"])
        kind = traj_spec.pop("kind", "orbit")
        traj_spec["frames"] = frames
        poses = trajectory(kind, **traj_spec)
    noise = spec["noise"] if noise_preset == "scene" else NOISE_PRESETS[noise_preset]
    if seed is not None and noise is not None:
        noise = NoiseModel(**{**noise.__dict__, "seed": seed})

    out = Path(out_dir)
    for sub in ("depth", "labels", "scores", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    volume_cfg = volume_config_for_scene(scene, spec["volume"])
    run_cfg = vio.RunConfig(volume=volume_cfg, intrinsics=intrinsics)
    vio.save_run_config(run_cfg, out / "config.yaml")
    vio.save_trajectory(poses, out / "trajectory.txt")

    for i, pose in enumerate(poses):
        depth, labels = render_depth(scene, intrinsics, pose, frame_index=i)
        if noise is not None:
            depth = apply_noise(depth, noise)
        name = f"{i:06d}.png"
        vio.write_depth(depth, out / "depth" / name)
        vio.write_labels(labels, out / "labels" / name, out / "scores" / name)

    gt_volume = bake_gt_volume(scene, volume_cfg)
    vio.save_volume(gt_volume, out / "gt" / "volume.vxf")
    vio.write_mesh_ply(marching_cubes(gt_volume), out / "gt" / "mesh.ply")
    click.echo(f"wrote {len(poses)} frames to {out} "
               f"(volume {volume_cfg.dims}, voxel {volume_cfg.voxel_size:g} m)")


@cli.command("sweep")
@click.argument("dataset", type=click.Path(exists=True, file_okay=False))
@click.option("--thresholds", default="0,1,2,4,8", show_default=True,
              help="Comma-separated outlier filter values.")
@click.option("--csv", "csv_path", type=click.Path(), help="Write the sweep table as CSV.")
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--fscore-threshold", type=float, default=None,
              help="Distance threshold (default: from config).")
@click.option("--seed", type=int, default=0, show_default=True)
def cmd_sweep(dataset, thresholds, csv_path, config_path, fscore_threshold, seed):
    """Fuse once, then score the mesh at several outlier filter values."""
    try:
        values = sorted(float(t) for t in thresholds.split(",") if t.strip())
    except ValueError as e:
        raise click.UsageError(f"bad threshold list {thresholds!r}: {e}")
    if not values:
        raise click.UsageError("threshold list is empty")

    config, records = _load_dataset(dataset, config_path)
    gt_path = Path(dataset) / "gt" / "mesh.ply"
    if not gt_path.is_file():
        raise FileNotFoundError(f"missing ground truth mesh {gt_path}")
    gt_mesh = vio.load_mesh_ply(gt_path)
    dist = fscore_threshold if fscore_threshold is not None else config.fscore_threshold

    volume, _, _ = _run_fusion(config, records, semantics=False, fps_report=False)
    rows = []
    for t in values:
        mesh = marching_cubes(volume, t)
        if mesh.is_empty:
            report = ReconReport(0.0, 0.0, 0.0, dist, 0, 0)
        else:
            report = fscore(mesh, gt_mesh, threshold=dist,
                            density=config.sample_density, seed=seed)
        rows.append([f"{t:g}", f"{report.precision:.6f}", f"{report.recall:.6f}",
                     f"{report.f1:.6f}"])
        click.echo(f"filter {t:>6g}: precision {report.precision:7.2f}  "
                   f"recall {report.recall:7.2f}  f1 {report.f1:7.2f}")
    if csv_path:
        _write_csv(csv_path, ["threshold", "precision", "recall", "f1"], rows)


@cli.command("info")
@click.argument("path", type=click.Path(exists=True))
def cmd_info(path):
    """Describe a dataset directory, checkpoint, or mesh."""
    p = Path(path)
    if p.is_dir():
        records = vio.discover_frames(p)
        labeled = sum(1 for r in records if r.label_path is not None)
        click.echo(f"dataset: {len(records)} frames ({labeled} with labels)")
        cfg_file = p / "config.yaml"
        if cfg_file.is_file():
            cfg = vio.load_run_config(cfg_file)
            click.echo(f"volume {cfg.volume.dims}, voxel {cfg.volume.voxel_size:g} m, "
                       f"truncation {cfg.volume.truncation:g} m, "
                       f"{cfg.volume.storage_precision} precision")
        return
    with open(p, "rb") as f:
        magic = f.read(4)
    if magic == b"VXF1":
        volume = vio.load_volume(p)
        stats = snapshot_stats(volume)
        cfg = volume.config
        click.echo(f"checkpoint: dims {cfg.dims}, voxel {cfg.voxel_size:g} m, "
                   f"truncation {cfg.truncation:g} m, {cfg.storage_precision} precision")
        click.echo(f"occupied {stats.occupied_voxels}, labeled {stats.labeled_voxels}, "
                   f"classes {volume.class_count}")
        edges, counts = stats.weight_histogram
        hist = ", ".join(f"[{edges[i]:g},{edges[i+1]:g}): {counts[i]}"
                         for i in range(len(counts)))
        click.echo(f"weight histogram: {hist}")
    elif magic[:3] == b"ply":
        mesh = vio.load_mesh_ply(p)
        labeled = int(np.count_nonzero(mesh.vertex_labels > 0))
        click.echo(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.triangles)} "
                   f"triangles, {labeled} labeled vertices")
    else:
        raise VoxfuseError(f"{p}: unrecognized file (magic {magic!r})")


def main(argv=None) -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as e:
        click.echo(f"usage error: {e.format_message()}", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except (VoxfuseError, FileNotFoundError, OSError) as e:
        click.echo(f"data error: {e}", err=True)
        return 2
    except Exception as e:  # pragma: no cover - last resort
        click.echo(f"internal error: {type(e).__name__}: {e}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
