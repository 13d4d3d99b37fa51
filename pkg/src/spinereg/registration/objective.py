"""Pose-vector encoding and the articulated alignment objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.special import expit

from ..errors import DimensionMismatchError, SpineRegError
from ..geometry import NeighborIndex, PointCloud, RigidTransform, sample_on_triangles
from ..kinematics import ArticulatedPose, SpineModel, clamp_pose, forward_kinematics
from .correspond import ObjectiveReport


def pose_vector_length(model: SpineModel) -> int:
    return 3 * model.n_joints + 6


def encode_pose(model: SpineModel, pose: ArticulatedPose) -> np.ndarray:
    """Flatten a pose: joint angles then global axis-angle + translation."""
    if pose.n_joints != model.n_joints:
        raise DimensionMismatchError(
            f"pose has {pose.n_joints} joints, model has {model.n_joints}")
    rotvec = Rotation.from_matrix(pose.global_transform.rotation).as_rotvec()
    return np.concatenate([pose.joint_angles.ravel(), rotvec,
                           pose.global_transform.translation])


def decode_pose(model: SpineModel, vector: np.ndarray,
                clamp: bool = True) -> ArticulatedPose:
    """Inverse of :func:`encode_pose`; joint angles are clamped by default."""
    vec = np.asarray(vector, dtype=float).ravel()
    expected = pose_vector_length(model)
    if len(vec) != expected:
        raise DimensionMismatchError(
            f"pose vector length {len(vec)}, expected {expected}")
    angles = vec[:3 * model.n_joints].reshape(model.n_joints, 3)
    rotation = Rotation.from_rotvec(vec[-6:-3]).as_matrix()
    pose = ArticulatedPose(angles, RigidTransform(rotation, vec[-3:]))
    return clamp_pose(model, pose) if clamp else pose


@dataclass(frozen=True)
class MeshSampleCache:
    """Fixed surface sample of the model, tagged per vertebra.

    Sampling once and replaying rigid per-link transforms keeps the
    objective deterministic and cheap across evaluations. With
    ``posterior_only`` the sample is restricted to each vertebra's
    posterior half (positive offset along its anteroposterior axis):
    in a posterior surgical approach the anterior surface is never
    scanned, and letting it participate biases the fit.
    """

    points: np.ndarray       # (N, 3), undeformed model coordinates
    link_indices: np.ndarray  # (N,), which vertebra each point belongs to
    seed: int

    @classmethod
    def build(cls, model: SpineModel, count: int, seed: int,
              posterior_only: bool = False) -> "MeshSampleCache":
        points, links = [], []
        areas = np.array([link.mesh.surface_area() for link in model.links])
        if areas.sum() <= 0:
            raise SpineRegError("model has no surface to sample")
        # Allocate points per link by surface area, keeping the exact total.
        quotas = np.floor(areas / areas.sum() * count).astype(int)
        remainder = count - quotas.sum()
        order = np.argsort(-(areas / areas.sum() * count - quotas))
        quotas[order[:remainder]] += 1
        for i, (link, quota) in enumerate(zip(model.links, quotas)):
            if quota == 0:
                continue
            pts, _ = sample_on_triangles(link.mesh, int(quota), seed + i)
            if posterior_only and model.n_joints:
                joint = model.joints[min(i, model.n_joints - 1)]
                keep = (pts - link.centroid) @ joint.axes[1] >= 0.0
                pts = pts[keep]
                if len(pts) == 0:
                    continue
            points.append(pts)
            links.append(np.full(len(pts), i, dtype=np.int64))
        if not points:
            raise SpineRegError("sampling produced no cache points")
        return cls(np.vstack(points), np.concatenate(links), seed)

    def __len__(self) -> int:
        return len(self.points)

    def _slices(self):
        # Points are stored grouped by link in ascending order.
        bounds = np.searchsorted(self.link_indices,
                                 np.arange(self.link_indices.max() + 2))
        return bounds

    def deformed(self, transforms) -> np.ndarray:
        """Apply per-link rigid transforms to the cached sample."""
        out = np.empty_like(self.points)
        bounds = self._slices()
        for i in range(len(bounds) - 1):
            lo, hi = bounds[i], bounds[i + 1]
            if hi > lo:
                out[lo:hi] = transforms[i].apply(self.points[lo:hi])
        return out


def objective(model: SpineModel, pose_vector: np.ndarray, scene: PointCloud,
              scene_index: NeighborIndex, corr_threshold: float,
              cache: MeshSampleCache,
              smooth_tau: Optional[float] = None,
              containment_tau: Optional[float] = None) -> ObjectiveReport:
    """Evaluate the alignment objective for a flat pose vector.

    Decodes and clamps the pose, deforms the cached mesh sample through
    forward kinematics, finds scene correspondences within
    ``corr_threshold``, and blends correspondence ratio with containment
    at equal weight (lower combined is better).

    ``smooth_tau`` swaps the hard correspondence count for its sigmoid
    relaxation; ``containment_tau`` (mm) likewise relaxes the containment
    step function. Both are for the optimizer's benefit: the hard terms
    are piecewise constant in the pose, so quasi-Newton descent sees no
    slope. Reports carry whichever variant was computed.
    """
    if scene.normals is None:
        raise SpineRegError("scene cloud must carry normals")
    pose = decode_pose(model, pose_vector, clamp=True)
    transforms = forward_kinematics(model, pose)
    deformed = cache.deformed(transforms)

    # One unbounded NN query serves the hard count, the containment pairs,
    # and the optional sigmoid relaxations.
    dist, idx = scene_index.query(deformed)
    hit = dist <= corr_threshold
    n_hit = int(hit.sum())
    if n_hit == 0:
        containment = 1.0
    else:
        v = scene.positions[idx[hit]] - deformed[hit]
        n = scene.normals[idx[hit]]
        signed = np.einsum("ij,ij->i", n, v)
        if containment_tau is None:
            containment = float((signed < 0.0).mean())
        else:
            containment = float(expit(-signed / containment_tau).mean())
    if smooth_tau is None:
        ratio = n_hit / len(deformed)
    else:
        ratio = float(expit((corr_threshold - dist) / smooth_tau).mean())
    return ObjectiveReport.from_terms(ratio, containment)
