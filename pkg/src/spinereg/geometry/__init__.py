"""Geometric primitives, I/O, meshing, sampling, and shape metrics."""

from .transforms import RigidTransform, rotation_about_axis
from .types import PointCloud, TriMesh, VoxelMask, PrincipalFrame, principal_frame
from .spatial import NeighborIndex, nearest_within
from .metrics import chamfer_distance, hausdorff_distance
from .sampling import sample_surface, sample_on_triangles, estimate_normals
from .meshing import marching_cubes, laplacian_smooth, mesh_from_mask
from .meshio import (
    load_mesh, load_cloud, save_mesh_ply, save_cloud_ply, save_mask, load_mask,
)

__all__ = [
    "RigidTransform", "rotation_about_axis",
    "PointCloud", "TriMesh", "VoxelMask", "PrincipalFrame", "principal_frame",
    "NeighborIndex", "nearest_within",
    "chamfer_distance", "hausdorff_distance",
    "sample_surface", "sample_on_triangles", "estimate_normals",
    "marching_cubes", "laplacian_smooth", "mesh_from_mask",
    "load_mesh", "load_cloud", "save_mesh_ply", "save_cloud_ply",
    "save_mask", "load_mask",
]
