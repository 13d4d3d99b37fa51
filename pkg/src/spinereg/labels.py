"""Dataset label production: scene crops, ICP propagation across a
sequence, lossless label files, and aggregate statistics.

A label bundles the articulated pose for a sequence's reference frame,
one rigid transform + fitness per subsequent frame (found by chained
ICP), and per-frame scene crops: every scene point within the crop
radius of the registered mesh sample, plus the mesh-sample points those
scene points correspond to.

Label files are canonical JSON — keys sorted, floats via ``repr`` — so
saving the same label twice is byte-identical, and they carry content
hashes of the referenced cloud files so stale references are caught on
load.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import SpineRegError, StaleReferenceError
from .geometry import NeighborIndex, PointCloud, RigidTransform, load_cloud, save_cloud_ply
from .kinematics import ArticulatedPose, SpineModel, deform_mesh
from .registration import FitnessReport, icp_refine

LABEL_SCHEMA = "spinereg/alignment-label@1"
DEFAULT_CROP_RADIUS = 50.0


@dataclass(frozen=True)
class SequenceRecord:
    """One recorded sequence: ordered frame cloud files and labeling context."""

    sequence_id: str
    frame_files: Tuple[str, ...]
    reference_frame: int
    exposure: int
    landmarks: Tuple[Tuple[Tuple[float, float, float], Tuple[float, float, float]], ...] = ()

    def __post_init__(self):
        frames = tuple(str(f) for f in self.frame_files)
        if not 0 <= self.reference_frame < len(frames):
            raise ValueError(
                f"reference frame {self.reference_frame} outside 0..{len(frames) - 1}")
        object.__setattr__(self, "frame_files", frames)
        object.__setattr__(self, "landmarks", tuple(
            (tuple(map(float, a)), tuple(map(float, b))) for a, b in self.landmarks))

    def landmark_arrays(self):
        if len(self.landmarks) < 3:
            raise SpineRegError(
                f"sequence {self.sequence_id}: coarse alignment needs >= 3 landmark pairs")
        pairs = np.asarray(self.landmarks, dtype=float)
        return pairs[:, 0, :], pairs[:, 1, :]

    def to_json_dict(self) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "frame_files": list(self.frame_files),
            "reference_frame": self.reference_frame,
            "exposure": self.exposure,
            "landmarks": [[list(a), list(b)] for a, b in self.landmarks],
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SequenceRecord":
        return cls(doc["sequence_id"], tuple(doc["frame_files"]),
                   int(doc["reference_frame"]), int(doc["exposure"]),
                   tuple((tuple(a), tuple(b)) for a, b in doc.get("landmarks", [])))


@dataclass(frozen=True)
class SceneCrop:
    """Scene points near the registered mesh and their mesh-side partners."""

    scene_indices: np.ndarray
    mesh_indices: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "scene_indices",
                           np.asarray(self.scene_indices, dtype=np.int64))
        object.__setattr__(self, "mesh_indices",
                           np.asarray(self.mesh_indices, dtype=np.int64))


@dataclass(frozen=True)
class FrameAlignment:
    """Per-frame propagation outcome."""

    frame_index: int
    frame_file: str
    skipped: bool = False
    skip_reason: str = ""
    transform: RigidTransform = field(default_factory=RigidTransform.identity)
    fitness: float = 0.0
    inlier_rmse: float = 0.0
    iterations: int = 0
    crop_size: int = 0


@dataclass
class AlignmentLabel:
    """Persisted label for one sequence."""

    sequence_id: str
    model_ref: str
    pose: ArticulatedPose
    sample_seed: int
    sample_count: int
    icp_threshold: float
    crop_radius: float
    exposure: int
    frames: List[FrameAlignment]
    frame_hashes: dict
    variant: str = "deformed"
    schema: str = LABEL_SCHEMA


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def crop_scene(scene: PointCloud, deformed_sample: PointCloud,
               radius: float = DEFAULT_CROP_RADIUS) -> SceneCrop:
    """Scene indices within ``radius`` mm of the mesh sample, plus the
    mesh-sample indices that are nearest neighbor to a kept scene point."""
    if len(scene) == 0 or len(deformed_sample) == 0:
        raise SpineRegError("crop needs non-empty scene and mesh sample")
    dist, idx = NeighborIndex(deformed_sample).query(scene.positions)
    keep = dist <= radius
    scene_idx = np.flatnonzero(keep)
    mesh_idx = np.unique(idx[keep])
    return SceneCrop(scene_idx, mesh_idx, radius)


def propagate_labels(model: SpineModel, seq: SequenceRecord, pose: ArticulatedPose,
                     model_ref: str, icp_threshold: float = 10.0,
                     icp_max_iterations: int = 50, sample_count: int = 30_000,
                     sample_seed: int = 0, crop_radius: float = DEFAULT_CROP_RADIUS,
                     crop_dir: Optional[Path] = None) -> AlignmentLabel:
    """Chain ICP from the labeled reference frame through the sequence.

    Samples the deformed mesh once (seed recorded in the label), then for
    the reference frame and every later frame runs ICP initialized from
    the previous frame's transform. Unreadable frames are marked skipped
    and the chain carries on with the last good transform. Crops are
    written per frame when ``crop_dir`` is given.
    """
    from .geometry.sampling import sample_surface  # local import to avoid cycle

    deformed = deform_mesh(model, pose)
    sample = sample_surface(deformed, sample_count, sample_seed)
    frames: List[FrameAlignment] = []
    hashes = {}
    current = RigidTransform.identity()
    if crop_dir is not None:
        crop_dir = Path(crop_dir)
        crop_dir.mkdir(parents=True, exist_ok=True)

    for index in range(seq.reference_frame, len(seq.frame_files)):
        frame_file = seq.frame_files[index]
        try:
            cloud = load_cloud(frame_file)
            if len(cloud) == 0:
                raise SpineRegError("empty frame cloud")
        except Exception as exc:  # noqa: BLE001 - skip-and-report policy
            frames.append(FrameAlignment(index, frame_file, skipped=True,
                                         skip_reason=str(exc)))
            continue
        hashes[frame_file] = file_sha256(frame_file)
        scene_index = NeighborIndex(cloud)
        report = icp_refine(sample, scene_index, icp_threshold,
                            icp_max_iterations, init=current)
        current = report.transform
        moved = PointCloud(current.apply(sample.positions))
        crop = crop_scene(cloud, moved, crop_radius)
        if crop_dir is not None:
            _write_crop(crop_dir, seq.sequence_id, index, cloud, crop)
        frames.append(FrameAlignment(index, frame_file, transform=current,
                                     fitness=report.fitness,
                                     inlier_rmse=report.inlier_rmse,
                                     iterations=report.iterations,
                                     crop_size=len(crop.scene_indices)))

    return AlignmentLabel(
        sequence_id=seq.sequence_id, model_ref=str(model_ref), pose=pose,
        sample_seed=sample_seed, sample_count=sample_count,
        icp_threshold=icp_threshold, crop_radius=crop_radius,
        exposure=seq.exposure, frames=frames, frame_hashes=hashes)


def _crop_paths(crop_dir: Path, sequence_id: str, frame_index: int):
    stem = f"{sequence_id}_frame{frame_index:06d}"
    return crop_dir / f"{stem}_crop.ply", crop_dir / f"{stem}_indices.json"


def _write_crop(crop_dir: Path, sequence_id: str, frame_index: int,
                cloud: PointCloud, crop: SceneCrop) -> None:
    ply_path, idx_path = _crop_paths(crop_dir, sequence_id, frame_index)
    save_cloud_ply(cloud.select(crop.scene_indices), ply_path)
    doc = {
        "frame_index": frame_index,
        "radius_mm": crop.radius,
        "scene_indices": crop.scene_indices.tolist(),
        "mesh_indices": crop.mesh_indices.tolist(),
    }
    idx_path.write_text(_canonical_json(doc))


def _transform_dict(t: RigidTransform) -> dict:
    return {"rotation": [[float(v) for v in row] for row in t.rotation],
            "translation_mm": [float(v) for v in t.translation]}


def _transform_from_dict(doc: dict) -> RigidTransform:
    return RigidTransform(np.asarray(doc["rotation"], dtype=float),
                          np.asarray(doc["translation_mm"], dtype=float))


def _canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def label_to_json_dict(label: AlignmentLabel) -> dict:
    return {
        "schema": label.schema,
        "sequence_id": label.sequence_id,
        "model_ref": label.model_ref,
        "variant": label.variant,
        "exposure": label.exposure,
        "pose": label.pose.to_json_dict(),
        "sample_seed": label.sample_seed,
        "sample_count": label.sample_count,
        "icp_threshold_mm": label.icp_threshold,
        "crop_radius_mm": label.crop_radius,
        "frame_hashes": dict(sorted(label.frame_hashes.items())),
        "frames": [
            {
                "frame_index": f.frame_index,
                "frame_file": f.frame_file,
                "skipped": f.skipped,
                "skip_reason": f.skip_reason,
                "transform": _transform_dict(f.transform),
                "fitness": f.fitness,
                "inlier_rmse_mm": f.inlier_rmse,
                "iterations": f.iterations,
                "crop_size": f.crop_size,
            }
            for f in label.frames
        ],
    }


def save_label(label: AlignmentLabel, path) -> Path:
    """Atomically write the label as canonical JSON."""
    path = Path(path)
    text = _canonical_json(label_to_json_dict(label))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
    return path


def load_label(path, verify_hashes: bool = True) -> AlignmentLabel:
    """Read a label; raises :class:`StaleReferenceError` when a referenced
    frame cloud's content hash no longer matches."""
    path = Path(path)
    doc = json.loads(path.read_text())
    if doc.get("schema") != LABEL_SCHEMA:
        raise SpineRegError(f"{path}: unknown label schema {doc.get('schema')!r}")
    if verify_hashes:
        for frame_file, expected in doc.get("frame_hashes", {}).items():
            candidate = Path(frame_file)
            if not candidate.is_absolute():
                candidate = path.parent / candidate
            if not candidate.exists():
                raise StaleReferenceError(f"{path}: referenced cloud {frame_file} is missing")
            actual = file_sha256(candidate)
            if actual != expected:
                raise StaleReferenceError(
                    f"{path}: content hash mismatch for {frame_file}")
    frames = [
        FrameAlignment(
            frame_index=int(f["frame_index"]), frame_file=f["frame_file"],
            skipped=bool(f["skipped"]), skip_reason=f.get("skip_reason", ""),
            transform=_transform_from_dict(f["transform"]),
            fitness=float(f["fitness"]), inlier_rmse=float(f["inlier_rmse_mm"]),
            iterations=int(f["iterations"]), crop_size=int(f["crop_size"]),
        )
        for f in doc["frames"]
    ]
    return AlignmentLabel(
        sequence_id=doc["sequence_id"], model_ref=doc["model_ref"],
        pose=ArticulatedPose.from_json_dict(doc["pose"]),
        sample_seed=int(doc["sample_seed"]), sample_count=int(doc["sample_count"]),
        icp_threshold=float(doc["icp_threshold_mm"]),
        crop_radius=float(doc["crop_radius_mm"]), exposure=int(doc["exposure"]),
        frames=frames, frame_hashes=dict(doc.get("frame_hashes", {})),
        variant=doc.get("variant", "deformed"), schema=doc["schema"])


@dataclass(frozen=True)
class SummaryRow:
    exposure: object  # int or "total"
    variant: str
    n_frames: int
    fitness_mean: float
    fitness_std: float
    rmse_mean: float
    rmse_std: float


def summarize(labels: Sequence[AlignmentLabel]) -> List[SummaryRow]:
    """Mean and population standard deviation of per-frame fitness/RMSE,
    grouped by exposure and variant, plus a total row per variant."""
    if not labels:
        raise ValueError("summarize needs at least one label")
    groups: dict = {}
    for label in labels:
        values = [(f.fitness, f.inlier_rmse) for f in label.frames if not f.skipped]
        groups.setdefault((label.exposure, label.variant), []).extend(values)
        groups.setdefault(("total", label.variant), []).extend(values)

    rows = []
    for (exposure, variant), values in sorted(
            groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        arr = np.asarray(values, dtype=float)
        rows.append(SummaryRow(
            exposure=exposure, variant=variant, n_frames=len(arr),
            fitness_mean=float(arr[:, 0].mean()), fitness_std=float(arr[:, 0].std()),
            rmse_mean=float(arr[:, 1].mean()), rmse_std=float(arr[:, 1].std())))
    return rows


def summary_csv(rows: Sequence[SummaryRow]) -> str:
    """Table-style CSV: one line per exposure with rigid and deformed columns."""
    by_exposure: dict = {}
    for row in rows:
        by_exposure.setdefault(row.exposure, {})[row.variant] = row
    lines = ["exposure,n_frames,"
             "rigid_fitness_mean,rigid_fitness_std,rigid_rmse_mean,rigid_rmse_std,"
             "deformed_fitness_mean,deformed_fitness_std,deformed_rmse_mean,deformed_rmse_std"]
    for exposure in sorted(by_exposure, key=str):
        variants = by_exposure[exposure]
        n = max(v.n_frames for v in variants.values())
        cells = [str(exposure), str(n)]
        for variant in ("rigid", "deformed"):
            row = variants.get(variant)
            if row is None:
                cells += ["", "", "", ""]
            else:
                cells += [f"{row.fitness_mean:.6f}", f"{row.fitness_std:.6f}",
                          f"{row.rmse_mean:.6f}", f"{row.rmse_std:.6f}"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
