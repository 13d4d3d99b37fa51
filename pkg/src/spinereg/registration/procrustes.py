"""Closed-form rigid alignment of paired 3D points (Kabsch / SVD)."""

from __future__ import annotations

import numpy as np

from ..errors import DegenerateGeometryError
from ..geometry import RigidTransform


def _is_collinear(points: np.ndarray, tol: float = 1e-9) -> bool:
    centered = points - points.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    return svals[1] <= tol * max(svals[0], 1.0)


def rigid_from_paired_points(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` onto ``target``.

    No scaling; the rotation is forced proper (det = +1) by flipping the
    smallest singular direction when the SVD hands back a reflection.
    """
    src = np.asarray(source, dtype=float).reshape(-1, 3)
    dst = np.asarray(target, dtype=float).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError(f"paired point counts differ: {len(src)} vs {len(dst)}")
    if len(src) < 3:
        raise DegenerateGeometryError(f"need at least 3 pairs, got {len(src)}")
    centroid_src = src.mean(axis=0)
    centroid_dst = dst.mean(axis=0)
    h = (src - centroid_src).T @ (dst - centroid_dst)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    translation = centroid_dst - rotation @ centroid_src
    return RigidTransform(rotation, translation)


def coarse_align_landmarks(pre_landmarks: np.ndarray,
                           intra_landmarks: np.ndarray) -> RigidTransform:
    """Coarse registration from >= 3 paired anatomical landmarks.

    Maps preoperative landmark positions onto their intraoperative
    counterparts. Either set being collinear is rejected since the
    rotation would be underdetermined about the common line.
    """
    pre = np.asarray(pre_landmarks, dtype=float).reshape(-1, 3)
    intra = np.asarray(intra_landmarks, dtype=float).reshape(-1, 3)
    if len(pre) != len(intra):
        raise ValueError(f"landmark counts differ: {len(pre)} vs {len(intra)}")
    if len(pre) < 3:
        raise DegenerateGeometryError(f"need at least 3 landmarks, got {len(pre)}")
    for name, pts in (("preoperative", pre), ("intraoperative", intra)):
        if _is_collinear(pts):
            raise DegenerateGeometryError(f"{name} landmarks are collinear")
    return rigid_from_paired_points(pre, intra)
