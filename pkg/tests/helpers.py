"""Shared fixtures-in-plain-functions for the test suite."""

import numpy as np

from spinereg.geometry import TriMesh, estimate_normals, sample_surface
from spinereg.kinematics import build_chain, deform_mesh


def box_vertebra(center):
    """Vertebra stand-in: box elongated along +y with an apex marking the
    spinous-process side, so PCA axis signs are unambiguous."""
    corners = np.array([
        [-5, -10, -4], [5, -10, -4], [5, 20, -4], [-5, 20, -4],
        [-5, -10, 4], [5, -10, 4], [5, 20, 4], [-5, 20, 4],
    ], dtype=float)
    apex = np.array([[0.0, 30.0, 0.0]])
    verts = np.vstack([corners, apex]) + np.asarray(center, dtype=float)
    tris = [
        [0, 1, 2], [0, 2, 3], [4, 6, 5], [4, 7, 6],
        [0, 4, 5], [0, 5, 1], [3, 2, 6], [3, 6, 7],
        [0, 3, 7], [0, 7, 4], [1, 5, 6], [1, 6, 2],
        [2, 8, 3], [6, 7, 8], [2, 6, 8], [3, 8, 7],
    ]
    return TriMesh(verts, tris)


def box_chain(n_links=4, spacing=40.0):
    meshes = [(f"V{i}", box_vertebra([0.0, 0.0, spacing * i])) for i in range(n_links)]
    return build_chain(meshes)


def synthetic_scene(model, pose, n=2000, viewpoint=(0.0, 300.0, 60.0), seed=0):
    """Point cloud sampled from the deformed model, normals toward the viewpoint."""
    mesh = deform_mesh(model, pose)
    cloud = sample_surface(mesh, n, seed=seed)
    return estimate_normals(cloud, k=16, viewpoint=viewpoint)
