"""Coarse alignment, objective evaluation, pose optimization, ICP."""

from .procrustes import coarse_align_landmarks, rigid_from_paired_points
from .correspond import (
    CorrespondenceSet, ObjectiveReport, build_correspondences,
    containment_score, smoothed_correspondence_ratio,
)
from .objective import (
    MeshSampleCache, decode_pose, encode_pose, objective, pose_vector_length,
)
from .optimize import OptimizerConfig, TracePoint, optimize_pose
from .icp import FitnessReport, evaluate_alignment, icp_refine

__all__ = [
    "coarse_align_landmarks", "rigid_from_paired_points",
    "CorrespondenceSet", "ObjectiveReport", "build_correspondences",
    "containment_score", "smoothed_correspondence_ratio",
    "MeshSampleCache", "decode_pose", "encode_pose", "objective",
    "pose_vector_length",
    "OptimizerConfig", "TracePoint", "optimize_pose",
    "FitnessReport", "evaluate_alignment", "icp_refine",
]
