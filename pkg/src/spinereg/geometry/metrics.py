"""Shape-similarity metrics between point clouds."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateGeometryError
from .spatial import NeighborIndex
from .types import PointCloud


def _positions(cloud) -> np.ndarray:
    pos = cloud.positions if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    pos = pos.reshape(-1, 3)
    if len(pos) == 0:
        raise DegenerateGeometryError("metric undefined for an empty cloud")
    return pos


def chamfer_distance(a, b) -> float:
    """Bidirectional Chamfer distance in mm.

    Mean nearest-neighbor distance a->b averaged with b->a:
    ``0.5 * (mean_a min_b d + mean_b min_a d)``.
    """
    pa, pb = _positions(a), _positions(b)
    d_ab, _ = NeighborIndex(pb).query(pa)
    d_ba, _ = NeighborIndex(pa).query(pb)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def hausdorff_distance(a, b) -> float:
    """Symmetric Hausdorff distance in mm (max of the two directed maxima)."""
    pa, pb = _positions(a), _positions(b)
    d_ab, _ = NeighborIndex(pb).query(pa)
    d_ba, _ = NeighborIndex(pa).query(pb)
    return max(float(d_ab.max()), float(d_ba.max()))
