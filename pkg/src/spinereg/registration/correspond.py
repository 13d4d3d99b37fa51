"""Correspondence search and the two objective terms.

The alignment objective is equally weighted between (a) the fraction of
preoperative sample points with a scene correspondence inside a distance
threshold and (b) a containment penalty: the fraction of corresponded
pairs whose scene-normal / pair-vector dot product is negative, i.e.
whose mesh point pokes out above the scanned surface. Both terms live in
[0, 1] and lower is better for the combined scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..errors import SpineRegError
from ..geometry import NeighborIndex, PointCloud


@dataclass(frozen=True)
class CorrespondenceSet:
    """One nearest-neighbor pair per source point within the threshold."""

    source_indices: np.ndarray
    target_indices: np.ndarray
    distances: np.ndarray
    source_size: int
    threshold: float
    target_has_normals: bool

    def __post_init__(self):
        src = np.asarray(self.source_indices, dtype=np.int64)
        tgt = np.asarray(self.target_indices, dtype=np.int64)
        dist = np.asarray(self.distances, dtype=float)
        if not (len(src) == len(tgt) == len(dist)):
            raise ValueError("correspondence arrays must share length")
        if dist.size and dist.max() > self.threshold:
            raise ValueError("correspondence beyond the build threshold")
        object.__setattr__(self, "source_indices", src)
        object.__setattr__(self, "target_indices", tgt)
        object.__setattr__(self, "distances", dist)

    def __len__(self) -> int:
        return len(self.source_indices)

    @property
    def ratio(self) -> float:
        return len(self) / self.source_size if self.source_size else 0.0


@dataclass(frozen=True)
class ObjectiveReport:
    """Correspondence ratio, containment penalty, and their equal-weight blend."""

    corr_ratio: float
    containment: float
    combined: float

    def __post_init__(self):
        for name in ("corr_ratio", "containment", "combined"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @classmethod
    def from_terms(cls, corr_ratio: float, containment: float) -> "ObjectiveReport":
        return cls(corr_ratio, containment,
                   0.5 * (1.0 - corr_ratio) + 0.5 * containment)


def build_correspondences(source, target_index: NeighborIndex,
                          threshold: float) -> CorrespondenceSet:
    """Nearest scene neighbor per source point, kept only within ``threshold`` mm."""
    positions = source.positions if isinstance(source, PointCloud) else np.asarray(source, float)
    positions = positions.reshape(-1, 3)
    if len(positions) == 0:
        raise SpineRegError("cannot build correspondences from an empty source")
    dist, idx = target_index.query(positions, max_dist=threshold)
    hit = np.isfinite(dist)
    return CorrespondenceSet(
        source_indices=np.flatnonzero(hit),
        target_indices=idx[hit],
        distances=dist[hit],
        source_size=len(positions),
        threshold=threshold,
        target_has_normals=True,
    )


def containment_score(corrs: CorrespondenceSet, source_positions: np.ndarray,
                      target: PointCloud) -> float:
    """Mean containment penalty over the corresponded pairs.

    For each pair, ``v`` runs from the source (mesh) point to its scene
    point and ``n`` is the scene point's estimated normal; the pair is
    penalized (1) when ``n . v < 0``, i.e. the mesh point lies above the
    scanned surface. An empty correspondence set scores the worst case 1.
    """
    if target.normals is None:
        raise SpineRegError("containment needs scene normals")
    if len(corrs) == 0:
        return 1.0
    src = np.asarray(source_positions, dtype=float).reshape(-1, 3)
    v = target.positions[corrs.target_indices] - src[corrs.source_indices]
    n = target.normals[corrs.target_indices]
    penalized = np.einsum("ij,ij->i", n, v) < 0.0
    return float(penalized.mean())


def smoothed_correspondence_ratio(source_positions: np.ndarray,
                                  target_index: NeighborIndex,
                                  threshold: float, tau: float) -> float:
    """Sigmoid-weighted correspondence count in [0, 1].

    Differentiable stand-in for the hard count: each source point
    contributes ``sigmoid((threshold - d) / tau)``. Pulls the mesh toward
    the surface even inside the threshold, unlike the hard count.
    """
    positions = np.asarray(source_positions, dtype=float).reshape(-1, 3)
    dist, _ = target_index.query(positions)
    return float(expit((threshold - dist) / tau).mean())
