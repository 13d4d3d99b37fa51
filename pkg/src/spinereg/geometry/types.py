"""Core geometric value types: point clouds, triangle meshes, voxel masks.

All coordinates are millimeters. Every type is immutable after
construction (arrays are write-locked), so instances can be shared
freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DegenerateGeometryError
from .transforms import RigidTransform

_UNIT_TOL = 1e-6
_DEGENERATE_AREA = 1e-12


def _lock(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PointCloud:
    """Positions (N, 3) with optional per-point colors in [0, 1] and unit normals."""

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "positions", _lock(pos))
        n = len(pos)
        if self.colors is not None:
            col = np.array(self.colors, dtype=float).reshape(-1, 3)
            if len(col) != n:
                raise ValueError(f"colors length {len(col)} != positions length {n}")
            if col.size and (col.min() < 0.0 or col.max() > 1.0):
                raise ValueError("colors must lie in [0, 1]")
            object.__setattr__(self, "colors", _lock(col))
        if self.normals is not None:
            nor = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(nor) != n:
                raise ValueError(f"normals length {len(nor)} != positions length {n}")
            if nor.size:
                lengths = np.linalg.norm(nor, axis=1)
                if np.abs(lengths - 1.0).max() > _UNIT_TOL:
                    raise ValueError("normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", _lock(nor))

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def transformed(self, transform: RigidTransform) -> "PointCloud":
        normals = None
        if self.normals is not None:
            normals = self.normals @ transform.rotation.T
        return PointCloud(transform.apply(self.positions), self.colors, normals)

    def select(self, indices) -> "PointCloud":
        idx = np.asarray(indices)
        return PointCloud(
            self.positions[idx],
            self.colors[idx] if self.colors is not None else None,
            self.normals[idx] if self.normals is not None else None,
        )


@dataclass(frozen=True)
class TriMesh:
    """Triangle mesh: vertices (V, 3) in mm and triangles (T, 3) vertex indices.

    Construction drops degenerate (zero-area) triangles; out-of-range
    indices are rejected outright.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float).reshape(-1, 3)
        tris = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if tris.size:
            if tris.min() < 0 or tris.max() >= len(verts):
                raise ValueError(
                    f"triangle index out of range: max index {tris.max()} "
                    f"with {len(verts)} vertices")
            a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
            areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
            tris = tris[areas > _DEGENERATE_AREA]
        object.__setattr__(self, "vertices", _lock(verts))
        object.__setattr__(self, "triangles", _lock(tris))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def triangle_areas(self) -> np.ndarray:
        v, t = self.vertices, self.triangles
        if not len(t):
            return np.zeros(0)
        return 0.5 * np.linalg.norm(
            np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)

    def face_normals(self) -> np.ndarray:
        """Unit normals per triangle, right-hand winding."""
        v, t = self.vertices, self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        lengths = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(lengths == 0.0, 1.0, lengths)

    def surface_area(self) -> float:
        return float(self.triangle_areas().sum())

    def centroid(self) -> np.ndarray:
        """Mean of the vertex positions."""
        if not len(self.vertices):
            raise DegenerateGeometryError("empty mesh has no centroid")
        return self.vertices.mean(axis=0)

    def transformed(self, transform: RigidTransform) -> "TriMesh":
        return TriMesh(transform.apply(self.vertices), self.triangles)

    @classmethod
    def concatenate(cls, meshes) -> "TriMesh":
        verts, tris, offset = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            offset += m.n_vertices
        if not verts:
            return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return cls(np.vstack(verts), np.vstack(tris))


@dataclass(frozen=True)
class VoxelMask:
    """Boolean occupancy grid with world placement.

    Voxel (i, j, k) has its center at ``origin + spacing * (i, j, k)``.
    """

    occupancy: np.ndarray
    spacing: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        occ = np.array(self.occupancy, dtype=bool)
        if occ.ndim != 3:
            raise ValueError(f"occupancy must be 3D, got {occ.ndim}D")
        spacing = np.array(self.spacing, dtype=float).reshape(3)
        origin = np.array(self.origin, dtype=float).reshape(3)
        if (spacing <= 0).any():
            raise ValueError("spacing components must be positive")
        object.__setattr__(self, "occupancy", _lock(occ))
        object.__setattr__(self, "spacing", _lock(spacing))
        object.__setattr__(self, "origin", _lock(origin))

    @property
    def dims(self) -> tuple:
        return self.occupancy.shape


@dataclass(frozen=True)
class PrincipalFrame:
    """Centroid plus PCA axes ordered by descending explained variance.

    ``axes`` rows are orthonormal and right-handed
    (``axes[0] x axes[1] = axes[2]``); ``variances`` are in mm^2.
    """

    centroid: np.ndarray
    axes: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        centroid = np.array(self.centroid, dtype=float).reshape(3)
        axes = np.array(self.axes, dtype=float).reshape(3, 3)
        variances = np.array(self.variances, dtype=float).reshape(3)
        if np.abs(axes @ axes.T - np.eye(3)).max() > 1e-9:
            raise ValueError("axes are not orthonormal within 1e-9")
        if np.abs(np.cross(axes[0], axes[1]) - axes[2]).max() > 1e-9:
            raise ValueError("axes are not right-handed")
        if (variances < -1e-12).any():
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "centroid", _lock(centroid))
        object.__setattr__(self, "axes", _lock(axes))
        object.__setattr__(self, "variances", _lock(np.maximum(variances, 0.0)))


def principal_frame(points) -> PrincipalFrame:
    """PCA frame of a point set.

    Eigen-decomposes the centered covariance; axes come out ordered by
    descending variance and are flipped to a right-handed triple.
    Raises :class:`DegenerateGeometryError` when the points do not span
    a plane (fewer than 4 points or collinear).
    """
    pos = points.positions if isinstance(points, PointCloud) else np.asarray(points, dtype=float)
    pos = pos.reshape(-1, 3)
    if len(pos) < 4:
        raise DegenerateGeometryError(f"need at least 4 points for a principal frame, got {len(pos)}")
    centroid = pos.mean(axis=0)
    centered = pos - centroid
    cov = centered.T @ centered / len(pos)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = evals[::-1]
    axes = evecs[:, ::-1].T  # rows, descending variance
    if evals[0] <= 0.0 or evals[1] <= 1e-9 * evals[0]:
        raise DegenerateGeometryError("points are collinear or coincident; covariance is rank-deficient")
    if np.linalg.det(axes) < 0:
        axes = axes.copy()
        axes[2] = -axes[2]
    return PrincipalFrame(centroid, axes, np.maximum(evals, 0.0))
