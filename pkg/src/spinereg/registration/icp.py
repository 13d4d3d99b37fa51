"""Point-to-point ICP refinement and static alignment scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import SpineRegError
from ..geometry import NeighborIndex, PointCloud, RigidTransform
from .procrustes import rigid_from_paired_points

_CONVERGENCE_TOL = 1e-6


@dataclass(frozen=True)
class FitnessReport:
    """Alignment quality: matched source fraction, inlier RMSE (mm), and
    the transform that produced them."""

    fitness: float
    inlier_rmse: float
    iterations: int
    transform: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError(f"fitness {self.fitness} outside [0, 1]")
        if self.inlier_rmse < 0.0:
            raise ValueError("inlier_rmse must be non-negative")


def _match(positions: np.ndarray, index: NeighborIndex, threshold: float):
    dist, idx = index.query(positions, max_dist=threshold)
    hit = np.isfinite(dist)
    return hit, idx, dist


def _score(positions: np.ndarray, index: NeighborIndex, threshold: float,
           transform: RigidTransform, iterations: int) -> FitnessReport:
    hit, _, dist = _match(positions, index, threshold)
    n_hit = int(hit.sum())
    fitness = n_hit / len(positions)
    rmse = float(np.sqrt(np.mean(dist[hit] ** 2))) if n_hit else 0.0
    return FitnessReport(fitness, rmse, iterations, transform)


def evaluate_alignment(source, target_index: NeighborIndex,
                       threshold: float) -> FitnessReport:
    """Fitness and inlier RMSE of the clouds as they currently stand."""
    positions = source.positions if isinstance(source, PointCloud) \
        else np.asarray(source, dtype=float).reshape(-1, 3)
    if len(positions) == 0:
        raise SpineRegError("cannot evaluate an empty source")
    return _score(positions, target_index, threshold,
                  RigidTransform.identity(), 0)


def icp_refine(source, target_index: NeighborIndex, threshold: float,
               max_iterations: int = 50,
               init: RigidTransform = None) -> FitnessReport:
    """Iterative closest point with a hard correspondence threshold.

    Alternates nearest-neighbor matching (within ``threshold`` mm) and a
    closed-form rigid update until the incremental transform is below
    1e-6 or ``max_iterations`` is hit. If the initial transform yields no
    correspondences at all, the init is returned untouched with fitness 0.
    """
    positions = source.positions if isinstance(source, PointCloud) \
        else np.asarray(source, dtype=float).reshape(-1, 3)
    if len(positions) == 0 or len(target_index) == 0:
        raise SpineRegError("ICP needs non-empty source and target")
    transform = RigidTransform.identity() if init is None else init

    iterations = 0
    for _ in range(max_iterations):
        moved = transform.apply(positions)
        hit, idx, _ = _match(moved, target_index, threshold)
        if int(hit.sum()) < 3:
            if iterations == 0:
                return FitnessReport(0.0, 0.0, 0, transform)
            break
        update = rigid_from_paired_points(moved[hit],
                                          target_index.positions[idx[hit]])
        transform = update.compose(transform)
        iterations += 1
        delta = max(np.abs(update.rotation - np.eye(3)).max(),
                    np.abs(update.translation).max())
        if delta < _CONVERGENCE_TOL:
            break

    return _score(transform.apply(positions), target_index, threshold,
                  transform, iterations)
