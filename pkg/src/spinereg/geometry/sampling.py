"""Surface sampling and normal estimation."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from ..errors import DegenerateGeometryError
from .spatial import NeighborIndex
from .types import PointCloud, TriMesh


def sample_on_triangles(mesh: TriMesh, count: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples plus the triangle each came from.

    Deterministic for a fixed seed. Returns (points (count, 3),
    triangle indices (count,)).
    """
    if mesh.is_empty():
        raise DegenerateGeometryError("cannot sample an empty mesh")
    if count < 0:
        raise ValueError("count must be non-negative")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    tri_idx = rng.choice(len(areas), size=count, p=areas / areas.sum())
    u = rng.random(count)
    v = rng.random(count)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    tris = mesh.triangles[tri_idx]
    a = mesh.vertices[tris[:, 0]]
    b = mesh.vertices[tris[:, 1]]
    c = mesh.vertices[tris[:, 2]]
    points = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return points, tri_idx


def sample_surface(mesh: TriMesh, count: int, seed: int) -> PointCloud:
    """Uniform area-weighted random point sample of a mesh surface."""
    points, _ = sample_on_triangles(mesh, count, seed)
    return PointCloud(points)


def estimate_normals(cloud: PointCloud, k: int = 30, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Per-point normals from k-NN covariance, oriented toward ``viewpoint``.

    Each normal is the smallest-variance eigenvector of the covariance of
    the point's k nearest neighbors, sign-flipped so that
    ``normal . (viewpoint - point) >= 0``. Requires ``N >= k >= 3``.
    """
    n = len(cloud)
    if k < 3:
        raise ValueError(f"need k >= 3 neighbors, got {k}")
    if n < k:
        raise DegenerateGeometryError(f"cloud has {n} points, fewer than k={k}")
    viewpoint = np.asarray(viewpoint, dtype=float).reshape(3)
    pos = cloud.positions
    _, idx = NeighborIndex(pos).query_k(pos, k)
    neigh = pos[idx]  # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = vecs[:, :, 0]
    toward = viewpoint[None, :] - pos
    flip = np.einsum("ni,ni->n", normals, toward) < 0.0
    normals[flip] = -normals[flip]
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(lengths == 0.0, 1.0, lengths)
    return PointCloud(pos, cloud.colors, normals)
