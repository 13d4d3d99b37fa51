"""Command-line entry points for the registration and labeling pipeline."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import phantom as phantom_lab
from .errors import SpineRegError
from .geometry import NeighborIndex, estimate_normals, load_cloud
from .kinematics import ArticulatedPose, load_model, build_chain
from .geometry.meshio import load_mesh
from .labels import (
    SequenceRecord, load_label, propagate_labels, save_label, summarize,
    summary_csv,
)
from .registration import (
    OptimizerConfig, coarse_align_landmarks, encode_pose, icp_refine,
    objective, optimize_pose, MeshSampleCache,
)

log = logging.getLogger("spinereg")

EXIT_CONFIG_ERROR = 2


def _fail_config(message: str):
    click.echo(f"config error: {message}", err=True)
    sys.exit(EXIT_CONFIG_ERROR)


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        _fail_config(f"{path}: file not found")
    except json.JSONDecodeError as exc:
        _fail_config(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}")


def _optimizer_config(doc: dict, seed) -> OptimizerConfig:
    try:
        cfg = OptimizerConfig.from_json(json.dumps(doc))
    except (TypeError, ValueError) as exc:
        _fail_config(f"optimizer config: {exc}")
    if seed is not None:
        cfg = OptimizerConfig.from_json(json.dumps({**doc, "seed": int(seed)}))
    return cfg


@click.group()
@click.option("--log-level", default="warning",
              type=click.Choice(["debug", "info", "warning", "error"]))
def main(log_level):
    """Articulated spine registration and labeling toolkit."""
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


@main.command("phantom")
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              required=False, help="Trial batch config JSON; defaults are built in.")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=Path("phantom-out"))
def phantom_cmd(config_path, seed, out_dir):
    """Run seeded phantom trials; writes trials.csv plus per-trial JSON."""
    doc = _read_json(config_path) if config_path else {}
    if not isinstance(doc, dict):
        _fail_config("phantom config must be a JSON object")
    if seed is not None:
        doc["seed"] = seed
    try:
        batch = phantom_lab.BatchConfig.from_json_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        _fail_config(f"phantom config: {exc}")
    out_dir.mkdir(parents=True, exist_ok=True)
    results = phantom_lab.run_batch(batch, on_trial=lambda line: click.echo(line))
    csv_path = out_dir / "trials.csv"
    csv_path.write_text(phantom_lab.batch_csv(results))
    for i, result in enumerate(results):
        (out_dir / f"trial_{i:03d}.json").write_text(
            json.dumps(phantom_lab.trial_json_dict(result), indent=2, sort_keys=True) + "\n")
    stats = phantom_lab.batch_statistics(results)
    for line in phantom_lab.format_statistics(stats):
        click.echo(line)
    click.echo(f"wrote {csv_path}")


@main.command("align")
@click.option("--mesh-dir", type=click.Path(path_type=Path), required=True,
              help="Directory of ordered vertebra meshes (or a saved model.json).")
@click.option("--cloud", "cloud_path", type=click.Path(path_type=Path), required=True)
@click.option("--landmarks", "landmarks_path", type=click.Path(path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def align_cmd(mesh_dir, cloud_path, landmarks_path, config_path, seed, out_path):
    """Coarse-align, optimize the articulated pose, ICP, save the label."""
    cfg_doc = _read_json(config_path) if config_path else {}
    cfg = _optimizer_config(cfg_doc, seed)

    try:
        model = _load_model_dir(mesh_dir)
        scene = load_cloud(cloud_path)
        if scene.normals is None:
            scene = estimate_normals(scene, k=30, viewpoint=(0.0, 0.0, 0.0))
        lm_doc = _read_json(landmarks_path)
        pairs = lm_doc.get("pairs", lm_doc if isinstance(lm_doc, list) else None)
        if not pairs or len(pairs) < 3:
            raise SpineRegError(f"{landmarks_path}: need >= 3 landmark pairs")
        pre = np.array([p["mesh"] for p in pairs], dtype=float)
        intra = np.array([p["scene"] for p in pairs], dtype=float)
        coarse = coarse_align_landmarks(pre, intra)
        init = ArticulatedPose(np.zeros((model.n_joints, 3)), coarse)
        pose, trace = optimize_pose(model, scene, init, cfg)

        scene_index = NeighborIndex(scene)
        cache = MeshSampleCache.build(model, cfg.sample_count, cfg.seed)
        report = objective(model, encode_pose(model, pose), scene, scene_index,
                           cfg.corr_threshold, cache)
        click.echo(f"objective: corr_ratio={report.corr_ratio:.4f} "
                   f"containment={report.containment:.4f} combined={report.combined:.4f}")

        from .geometry import sample_surface
        from .kinematics import deform_mesh
        sample = sample_surface(deform_mesh(model, pose), cfg.sample_count, cfg.seed)
        icp = icp_refine(sample, scene_index, threshold=10.0, init=None)
        click.echo(f"icp: fitness={icp.fitness:.4f} rmse={icp.inlier_rmse:.4f} mm "
                   f"iterations={icp.iterations}")
        final_pose = ArticulatedPose(pose.joint_angles,
                                     icp.transform.compose(pose.global_transform))

        seq = SequenceRecord("adhoc", (str(cloud_path),), 0,
                             exposure=model.n_links,
                             landmarks=tuple((tuple(p["mesh"]), tuple(p["scene"]))
                                             for p in pairs))
        label = propagate_labels(model, seq, final_pose, str(mesh_dir),
                                 sample_count=cfg.sample_count,
                                 sample_seed=cfg.seed)
        save_label(label, out_path)
        click.echo(f"wrote {out_path}")
    except SpineRegError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


def _load_model_dir(mesh_dir: Path):
    model_json = mesh_dir if mesh_dir.suffix == ".json" else mesh_dir / "model.json"
    if model_json.exists():
        return load_model(model_json)
    mesh_files = sorted(list(mesh_dir.glob("*.ply")) + list(mesh_dir.glob("*.obj")))
    if len(mesh_files) < 2:
        raise SpineRegError(f"{mesh_dir}: need a model.json or >= 2 mesh files")
    return build_chain([(p.stem, load_mesh(p)) for p in mesh_files])


@main.command("propagate")
@click.option("--label", "label_path", type=click.Path(path_type=Path), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--icp-threshold", type=float, default=10.0)
def propagate_cmd(label_path, manifest_path, out_dir, icp_threshold):
    """Propagate a reference label across a sequence manifest via chained ICP."""
    doc = _read_json(manifest_path)
    try:
        seq = SequenceRecord.from_json_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        _fail_config(f"manifest: {exc}")
    try:
        label = load_label(label_path, verify_hashes=False)
        model = _load_model_dir(Path(label.model_ref))
        out_dir.mkdir(parents=True, exist_ok=True)
        updated = propagate_labels(model, seq, label.pose, label.model_ref,
                                   icp_threshold=icp_threshold,
                                   sample_count=label.sample_count,
                                   sample_seed=label.sample_seed,
                                   crop_dir=out_dir / "crops")
        updated.variant = label.variant
        out_label = out_dir / f"{seq.sequence_id}.label.json"
        save_label(updated, out_label)
        rows = summarize([updated])
        (out_dir / "summary.csv").write_text(summary_csv(rows))
        n_ok = sum(not f.skipped for f in updated.frames)
        click.echo(f"propagated {n_ok}/{len(updated.frames)} frames; wrote {out_label}")
    except SpineRegError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@main.command("summarize")
@click.option("--labels", "labels_glob", type=str, required=True,
              help="Glob of label JSON files.")
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
def summarize_cmd(labels_glob, out_path):
    """Aggregate per-frame stats across labels into a Table-1-style CSV."""
    import glob as globlib
    files = sorted(globlib.glob(labels_glob))
    if not files:
        _fail_config(f"no label files match {labels_glob!r}")
    labels = [load_label(f, verify_hashes=False) for f in files]
    rows = summarize(labels)
    Path(out_path).write_text(summary_csv(rows))
    for row in rows:
        click.echo(f"exposure={row.exposure} variant={row.variant} n={row.n_frames} "
                   f"fitness={row.fitness_mean:.3f}(±{row.fitness_std:.3f}) "
                   f"rmse={row.rmse_mean:.3f}(±{row.rmse_std:.3f})")
    click.echo(f"wrote {out_path}")


@main.command("serve")
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8008)
def serve_cmd(host, port):
    """Start the labeling session service (HTTP JSON + progress stream)."""
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=host, port=port, log_level="info")


if __name__ == "__main__":
    main()
