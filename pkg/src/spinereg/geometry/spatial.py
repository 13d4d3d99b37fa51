"""Exact nearest-neighbor queries over point clouds (KD-tree backed)."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DegenerateGeometryError
from .types import PointCloud


class NeighborIndex:
    """Spatial index over a fixed target cloud.

    Queries are exact (KD-tree, no approximation) and the structure is
    read-only after construction, so concurrent queries are safe.
    """

    def __init__(self, target):
        pos = target.positions if isinstance(target, PointCloud) else np.asarray(target, dtype=float)
        pos = pos.reshape(-1, 3)
        if len(pos) == 0:
            raise DegenerateGeometryError("cannot index an empty cloud")
        self._positions = pos
        self._tree = cKDTree(pos)

    def __len__(self) -> int:
        return len(self._positions)

    @property
    def positions(self) -> np.ndarray:
        return self._positions

    def query(self, points: np.ndarray, max_dist: float = np.inf) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest neighbor per query point.

        Returns (distances, indices); misses beyond ``max_dist`` carry
        ``inf`` distance and index ``len(self)``.
        """
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        dist, idx = self._tree.query(pts, k=1, distance_upper_bound=max_dist,
                                     workers=-1)
        return dist, idx

    def query_k(self, points: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """k nearest neighbors per query point, (N, k) arrays."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        dist, idx = self._tree.query(pts, k=k, workers=-1)
        if k == 1:
            dist, idx = dist[:, None], idx[:, None]
        return dist, idx


def nearest_within(index: NeighborIndex, query: np.ndarray, max_dist: float) -> Optional[Tuple[int, float]]:
    """Closest indexed point to ``query`` iff it lies within ``max_dist`` mm."""
    dist, idx = index.query(np.asarray(query, dtype=float).reshape(1, 3), max_dist=max_dist)
    if not np.isfinite(dist[0]) or dist[0] > max_dist:
        return None
    return int(idx[0]), float(dist[0])
