"""Articulated spine model: vertebra links, intervertebral ball joints,
forward kinematics, and pose (de)serialization.

The chain is ordered caudal to rostral with the most caudal vertebra as
root. Joint i sits at the midpoint of the centroids of links i and i+1
and rotates about three anatomical axes (mediolateral, anteroposterior,
longitudinal) derived from the caudal vertebra's principal components.
Joint frames are body-fixed: joint j's position and axes are carried
along by the rotations of joints caudal to it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .errors import DegenerateGeometryError, DimensionMismatchError
from .geometry import RigidTransform, TriMesh, principal_frame, rotation_about_axis
from .geometry.meshio import load_mesh, save_mesh_ply

AXIS_NAMES = ("mediolateral", "anteroposterior", "longitudinal")

# Declared segmental range-of-motion defaults, degrees.
DEFAULT_LIMITS_DEG = (13.0, 6.0, 3.0)


def default_joint_limits() -> np.ndarray:
    """Symmetric per-axis (min, max) limits in radians."""
    half = np.radians(DEFAULT_LIMITS_DEG)
    return np.column_stack([-half, half])


@dataclass(frozen=True)
class VertebraLink:
    """One rigid vertebra: anatomical label, mesh, and vertex centroid."""

    label: str
    mesh: TriMesh
    centroid: np.ndarray = None

    def __post_init__(self):
        computed = self.mesh.centroid()
        if self.centroid is None:
            centroid = computed
        else:
            centroid = np.asarray(self.centroid, dtype=float).reshape(3)
            if np.abs(centroid - computed).max() > 1e-6:
                raise ValueError(f"{self.label}: centroid differs from mesh vertex mean")
        centroid = centroid.copy()
        centroid.setflags(write=False)
        object.__setattr__(self, "centroid", centroid)


@dataclass(frozen=True)
class BallJoint:
    """3-DOF rotational joint.

    ``axes`` rows are (mediolateral, anteroposterior, longitudinal) unit
    vectors; ``limits`` rows are (min, max) radians per axis with
    min <= 0 <= max.
    """

    position: np.ndarray
    axes: np.ndarray
    limits: np.ndarray

    def __post_init__(self):
        position = np.array(self.position, dtype=float).reshape(3)
        axes = np.array(self.axes, dtype=float).reshape(3, 3)
        limits = np.array(self.limits, dtype=float).reshape(3, 2)
        if np.abs(axes @ axes.T - np.eye(3)).max() > 1e-6:
            raise ValueError("joint axes must be mutually orthonormal within 1e-6")
        if (limits[:, 0] > 0).any() or (limits[:, 1] < 0).any():
            raise ValueError("joint limits must satisfy min <= 0 <= max per axis")
        for arr in (position, axes, limits):
            arr.setflags(write=False)
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "limits", limits)


@dataclass(frozen=True)
class SpineModel:
    """Ordered vertebra links (caudal -> rostral) and the joints between them."""

    links: Tuple[VertebraLink, ...]
    joints: Tuple[BallJoint, ...]

    def __post_init__(self):
        links = tuple(self.links)
        joints = tuple(self.joints)
        if len(joints) != len(links) - 1:
            raise ValueError(f"{len(links)} links need {len(links) - 1} joints, "
                             f"got {len(joints)}")
        for i, joint in enumerate(joints):
            midpoint = 0.5 * (links[i].centroid + links[i + 1].centroid)
            if np.abs(joint.position - midpoint).max() > 1e-6:
                raise ValueError(f"joint {i} is not at the inter-centroid midpoint")
        object.__setattr__(self, "links", links)
        object.__setattr__(self, "joints", joints)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(link.label for link in self.links)

    def full_mesh(self) -> TriMesh:
        return TriMesh.concatenate([link.mesh for link in self.links])


@dataclass(frozen=True)
class ArticulatedPose:
    """Per-joint rotation angles plus one global rigid transform.

    ``joint_angles`` has shape (n_joints, 3) ordered
    (mediolateral, anteroposterior, longitudinal), radians.
    """

    joint_angles: np.ndarray
    global_transform: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        angles = np.array(self.joint_angles, dtype=float).reshape(-1, 3)
        angles.setflags(write=False)
        object.__setattr__(self, "joint_angles", angles)

    @classmethod
    def zero(cls, model: SpineModel) -> "ArticulatedPose":
        return cls(np.zeros((model.n_joints, 3)))

    @property
    def n_joints(self) -> int:
        return len(self.joint_angles)

    def with_global(self, transform: RigidTransform) -> "ArticulatedPose":
        return ArticulatedPose(self.joint_angles, transform)

    def to_json_dict(self) -> dict:
        return {
            "joint_angles_rad": [list(map(float, row)) for row in self.joint_angles],
            "global": {
                "rotation": [list(map(float, row)) for row in self.global_transform.rotation],
                "translation_mm": [float(v) for v in self.global_transform.translation],
            },
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ArticulatedPose":
        g = doc["global"]
        return cls(np.asarray(doc["joint_angles_rad"], dtype=float),
                   RigidTransform(np.asarray(g["rotation"]), np.asarray(g["translation_mm"])))


def _check_dimensions(model: SpineModel, pose: ArticulatedPose) -> None:
    if pose.n_joints != model.n_joints:
        raise DimensionMismatchError(
            f"pose has {pose.n_joints} joints, model has {model.n_joints}")


def build_chain(vertebra_meshes: Sequence[Tuple[str, TriMesh]],
                default_limits: np.ndarray = None) -> SpineModel:
    """Assemble the kinematic chain from ordered (label, mesh) pairs.

    Joint axes come from the caudal neighbor's vertex PCA:

    * anteroposterior: largest-variance axis, signed from the centroid
      toward the farthest vertex along it (the spinous process);
    * longitudinal: whichever remaining principal axis is most parallel
      to the inter-centroid direction, signed toward the rostral neighbor;
    * mediolateral: their cross product (re-orthogonalized).
    """
    pairs = list(vertebra_meshes)
    if len(pairs) < 2:
        raise DegenerateGeometryError(f"need at least 2 vertebrae, got {len(pairs)}")
    limits = default_joint_limits() if default_limits is None \
        else np.asarray(default_limits, dtype=float).reshape(3, 2)

    links = [VertebraLink(label, mesh) for label, mesh in pairs]
    joints = []
    for i in range(len(links) - 1):
        caudal, rostral = links[i], links[i + 1]
        frame = principal_frame(caudal.mesh.vertices)

        ap = frame.axes[0]
        offsets = caudal.mesh.vertices - caudal.centroid
        projections = offsets @ ap
        tip = projections[np.abs(projections).argmax()]
        if tip < 0:
            ap = -ap

        toward_rostral = rostral.centroid - caudal.centroid
        norm = np.linalg.norm(toward_rostral)
        if norm < 1e-9:
            raise DegenerateGeometryError(f"links {i} and {i + 1} share a centroid")
        toward_rostral = toward_rostral / norm

        candidates = [frame.axes[1], frame.axes[2]]
        longitudinal = max(candidates, key=lambda a: abs(float(a @ toward_rostral)))
        if longitudinal @ toward_rostral < 0:
            longitudinal = -longitudinal

        # Re-orthogonalize against anteroposterior before taking the cross.
        longitudinal = longitudinal - (longitudinal @ ap) * ap
        longitudinal = longitudinal / np.linalg.norm(longitudinal)
        mediolateral = np.cross(ap, longitudinal)

        joints.append(BallJoint(
            position=0.5 * (caudal.centroid + rostral.centroid),
            axes=np.vstack([mediolateral, ap, longitudinal]),
            limits=limits,
        ))
    return SpineModel(tuple(links), tuple(joints))


def forward_kinematics(model: SpineModel, pose: ArticulatedPose) -> List[RigidTransform]:
    """Per-vertebra rigid transforms for an articulated pose.

    The root link gets identity local motion. Each joint rotates every
    link rostral to it about the joint's (already-transformed) position
    and axes; the pose's global transform is finally applied to all links.
    """
    _check_dimensions(model, pose)
    running = RigidTransform.identity()
    locals_ = [running]
    for joint, angles in zip(model.joints, pose.joint_angles):
        position = running.apply(joint.position)
        axes = joint.axes @ running.rotation.T
        rot = (rotation_about_axis(axes[0], angles[0])
               @ rotation_about_axis(axes[1], angles[1])
               @ rotation_about_axis(axes[2], angles[2]))
        running = RigidTransform.about_point(rot, position).compose(running)
        locals_.append(running)
    return [pose.global_transform.compose(t) for t in locals_]


def deform_mesh(model: SpineModel, pose: ArticulatedPose) -> TriMesh:
    """Concatenated model mesh with each vertebra rigidly moved by the pose."""
    transforms = forward_kinematics(model, pose)
    return TriMesh.concatenate(
        [link.mesh.transformed(t) for link, t in zip(model.links, transforms)])


def clamp_pose(model: SpineModel, pose: ArticulatedPose) -> ArticulatedPose:
    """Clamp every joint angle into its limits; the global transform passes through."""
    _check_dimensions(model, pose)
    limits = np.stack([joint.limits for joint in model.joints]) if model.n_joints \
        else np.zeros((0, 3, 2))
    clamped = np.clip(pose.joint_angles, limits[..., 0], limits[..., 1])
    return ArticulatedPose(clamped, pose.global_transform)


def pose_within_limits(model: SpineModel, pose: ArticulatedPose, tol: float = 1e-12) -> bool:
    for joint, angles in zip(model.joints, pose.joint_angles):
        if (angles < joint.limits[:, 0] - tol).any() or (angles > joint.limits[:, 1] + tol).any():
            return False
    return True


def model_to_json_dict(model: SpineModel, mesh_files: Sequence[str]) -> dict:
    """JSON document describing the chain; meshes referenced by file."""
    if len(mesh_files) != model.n_links:
        raise ValueError("one mesh file reference per link required")
    return {
        "schema": "spinereg/spine-model@1",
        "links": [
            {"label": link.label, "mesh_file": str(f),
             "centroid_mm": [float(v) for v in link.centroid]}
            for link, f in zip(model.links, mesh_files)
        ],
        "joints": [
            {
                "position_mm": [float(v) for v in j.position],
                "axes": {name: [float(v) for v in axis]
                         for name, axis in zip(AXIS_NAMES, j.axes)},
                "limits_rad": {name: [float(j.limits[i, 0]), float(j.limits[i, 1])]
                               for i, name in enumerate(AXIS_NAMES)},
            }
            for j in model.joints
        ],
    }


def save_model(model: SpineModel, directory) -> Path:
    """Write per-vertebra PLY meshes plus the chain JSON; returns the JSON path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mesh_files = []
    for i, link in enumerate(model.links):
        name = f"{i:02d}_{link.label}.ply"
        save_mesh_ply(link.mesh, directory / name)
        mesh_files.append(name)
    doc = model_to_json_dict(model, mesh_files)
    path = directory / "model.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_model(json_path) -> SpineModel:
    """Rebuild a model saved by :func:`save_model`.

    Joint geometry (positions, axes, limits) is taken from the document,
    not re-derived, so a round trip is exact.
    """
    json_path = Path(json_path)
    doc = json.loads(json_path.read_text())
    if doc.get("schema") != "spinereg/spine-model@1":
        raise ValueError(f"{json_path}: unknown model schema {doc.get('schema')!r}")
    links = tuple(
        VertebraLink(entry["label"], load_mesh(json_path.parent / entry["mesh_file"]))
        for entry in doc["links"]
    )
    joints = tuple(
        BallJoint(
            position=np.asarray(entry["position_mm"], dtype=float),
            axes=np.vstack([entry["axes"][name] for name in AXIS_NAMES]),
            limits=np.vstack([entry["limits_rad"][name] for name in AXIS_NAMES]),
        )
        for entry in doc["joints"]
    )
    return SpineModel(links, joints)
