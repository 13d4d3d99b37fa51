import numpy as np
import pytest

from spinereg.errors import DegenerateGeometryError
from spinereg.geometry import (
    PointCloud, PrincipalFrame, RigidTransform, TriMesh,
    principal_frame, rotation_about_axis,
)


class TestPointCloud:
    def test_empty_cloud_allowed(self):
        assert len(PointCloud(np.zeros((0, 3)))) == 0

    def test_color_range_enforced(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], colors=[[2.0, 0, 0]])

    def test_unit_normals_enforced(self):
        with pytest.raises(ValueError):
            PointCloud([[0, 0, 0]], normals=[[1.0, 1.0, 0.0]])

    def test_transform_rotates_normals(self):
        cloud = PointCloud([[1, 0, 0]], normals=[[1.0, 0.0, 0.0]])
        t = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), [0, 0, 0])
        out = cloud.transformed(t)
        assert np.allclose(out.normals, [[0.0, 1.0, 0.0]])

    def test_select_keeps_attributes(self):
        cloud = PointCloud([[0, 0, 0], [1, 1, 1]], colors=[[0, 0, 0], [1, 1, 1]])
        sub = cloud.select([1])
        assert len(sub) == 1 and np.allclose(sub.colors, [[1, 1, 1]])


class TestTriMesh:
    def test_out_of_range_index_rejected(self):
        with pytest.raises(ValueError, match="out of range"):
            TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 7]])

    def test_degenerate_triangles_dropped(self):
        mesh = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]],
                       [[0, 1, 2], [0, 1, 1], [0, 1, 3]])  # repeated + collinear
        assert mesh.n_triangles == 1

    def test_concatenate_offsets_indices(self):
        tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        both = TriMesh.concatenate([tri, tri])
        assert both.n_vertices == 6 and both.n_triangles == 2
        assert both.triangles[1].min() == 3

    def test_area_of_unit_right_triangle(self):
        tri = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        assert abs(tri.surface_area() - 0.5) < 1e-12


class TestPrincipalFrame:
    def test_box_axes_match_construction(self):
        # Axis-aligned box 40 x 20 x 10 mm: PCA axes must land on x, y, z.
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.5, 0.5, (4000, 3)) * [40.0, 20.0, 10.0]
        frame = principal_frame(pts)
        for axis, expected in zip(frame.axes, np.eye(3)):
            angle = np.degrees(np.arccos(min(1.0, abs(float(axis @ expected)))))
            assert angle < 2.0
        assert frame.variances[0] > frame.variances[1] > frame.variances[2]

    def test_rotation_equivariance_up_to_sign(self):
        rng = np.random.default_rng(4)
        pts = rng.normal(size=(500, 3)) * [6.0, 2.5, 1.0]
        rot = rotation_about_axis(rng.normal(size=3), 1.1)
        t = RigidTransform(rot, [5.0, -2.0, 1.0])
        f0 = principal_frame(pts)
        f1 = principal_frame(t.apply(pts))
        for a0, a1 in zip(f0.axes, f1.axes):
            rotated = rot @ a0
            assert min(np.abs(a1 - rotated).max(), np.abs(a1 + rotated).max()) < 1e-6

    def test_axes_orthonormal_right_handed(self):
        rng = np.random.default_rng(5)
        frame = principal_frame(rng.normal(size=(100, 3)) * [3.0, 2.0, 1.0])
        assert np.abs(frame.axes @ frame.axes.T - np.eye(3)).max() < 1e-9
        assert np.abs(np.cross(frame.axes[0], frame.axes[1]) - frame.axes[2]).max() < 1e-9

    def test_collinear_points_rejected(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
        with pytest.raises(DegenerateGeometryError):
            principal_frame(pts)

    def test_too_few_points_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            principal_frame(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=float))

    def test_invalid_frame_rejected(self):
        with pytest.raises(ValueError):
            PrincipalFrame(np.zeros(3), np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1.0]]),
                           np.ones(3))
