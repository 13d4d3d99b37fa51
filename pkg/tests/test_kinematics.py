import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from spinereg.errors import DegenerateGeometryError, DimensionMismatchError
from spinereg.geometry import RigidTransform, TriMesh, rotation_about_axis
from spinereg.kinematics import (
    ArticulatedPose, BallJoint, SpineModel, VertebraLink,
    build_chain, clamp_pose, deform_mesh, default_joint_limits,
    forward_kinematics, load_model, pose_within_limits, save_model,
)


from helpers import box_chain, box_vertebra


def four_link_chain(spacing=40.0):
    return box_chain(4, spacing)


def angle_between_deg(a, b):
    cos = abs(float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return np.degrees(np.arccos(min(1.0, cos)))


class TestBuildChain:
    def test_two_boxes_axis_assignment(self):
        model = build_chain([("L5", box_vertebra([0, 0, 0])),
                             ("L4", box_vertebra([0, 0, 40.0]))])
        joint = model.joints[0]
        expected_mid = 0.5 * (model.links[0].centroid + model.links[1].centroid)
        assert np.abs(joint.position - expected_mid).max() < 1e-6
        ap, longi = joint.axes[1], joint.axes[2]
        assert angle_between_deg(ap, [0, 1, 0]) < 2.0
        assert ap[1] > 0  # toward the apex
        assert angle_between_deg(longi, [0, 0, 1]) < 2.0
        assert longi[2] > 0  # toward the rostral neighbor

    def test_axes_orthonormal(self):
        model = four_link_chain()
        for joint in model.joints:
            assert np.abs(joint.axes @ joint.axes.T - np.eye(3)).max() < 1e-6

    def test_rotation_equivariance(self):
        rot = rotation_about_axis([1.0, 0.4, -0.2], 0.8)
        t = RigidTransform(rot, [7.0, -3.0, 11.0])
        base = [(f"V{i}", box_vertebra([0, 0, 40.0 * i])) for i in range(3)]
        moved = [(lbl, mesh.transformed(t)) for lbl, mesh in base]
        m0, m1 = build_chain(base), build_chain(moved)
        for j0, j1 in zip(m0.joints, m1.joints):
            assert np.abs(j1.position - t.apply(j0.position)).max() < 1e-6
            assert np.abs(j1.axes - j0.axes @ rot.T).max() < 1e-6

    def test_single_vertebra_rejected(self):
        with pytest.raises(DegenerateGeometryError):
            build_chain([("L5", box_vertebra([0, 0, 0]))])

    def test_midpoint_invariant_enforced(self):
        model = four_link_chain()
        bad_joint = BallJoint(model.joints[0].position + 1.0,
                              model.joints[0].axes, model.joints[0].limits)
        with pytest.raises(ValueError, match="midpoint"):
            SpineModel(model.links, (bad_joint,) + model.joints[1:])


def oracle_forward_kinematics(model, pose):
    """Independent 4x4 homogeneous-matrix composition using scipy rotations."""
    mats = [np.eye(4)]
    running = np.eye(4)
    for joint, angles in zip(model.joints, pose.joint_angles):
        p = running[:3, :3] @ joint.position + running[:3, 3]
        rot = np.eye(3)
        for axis_idx in range(3):
            axis_world = running[:3, :3] @ joint.axes[axis_idx]
            rot = rot @ Rotation.from_rotvec(axis_world * angles[axis_idx]).as_matrix()
        step = np.eye(4)
        step[:3, :3] = rot
        step[:3, 3] = p - rot @ p
        running = step @ running
        mats.append(running.copy())
    g = pose.global_transform.as_matrix()
    return [g @ m for m in mats]


class TestForwardKinematics:
    def test_zero_pose_is_identity(self):
        model = four_link_chain()
        transforms = forward_kinematics(model, ArticulatedPose.zero(model))
        for t in transforms:
            assert np.abs(t.as_matrix() - np.eye(4)).max() < 1e-12

    def test_single_joint_rotation_definition(self):
        model = build_chain([("a", box_vertebra([0, 0, 0])),
                             ("b", box_vertebra([0, 0, 40.0]))])
        theta = np.radians(10.0)
        pose = ArticulatedPose([[theta, 0.0, 0.0]])
        t_root, t_rostral = forward_kinematics(model, pose)
        assert np.abs(t_root.as_matrix() - np.eye(4)).max() < 1e-12
        joint = model.joints[0]
        expected = RigidTransform.about_point(
            rotation_about_axis(joint.axes[0], theta), joint.position)
        assert np.abs(t_rostral.as_matrix() - expected.as_matrix()).max() < 1e-9

    def test_matches_matrix_oracle_on_random_poses(self):
        model = four_link_chain()
        rng = np.random.default_rng(23)
        for _ in range(20):
            pose = ArticulatedPose(
                rng.uniform(-0.2, 0.2, (3, 3)),
                RigidTransform(rotation_about_axis(rng.normal(size=3), rng.uniform(-0.3, 0.3)),
                               rng.uniform(-20, 20, 3)))
            got = forward_kinematics(model, pose)
            expected = oracle_forward_kinematics(model, pose)
            for g, e in zip(got, expected):
                assert np.abs(g.as_matrix() - e).max() < 1e-9

    def test_locality_caudal_links_unmoved(self):
        model = four_link_chain()
        pose = ArticulatedPose.zero(model)
        angles = pose.joint_angles.copy()
        angles[2] = [0.1, -0.05, 0.03]  # only the most rostral joint
        moved = forward_kinematics(model, ArticulatedPose(angles))
        for t in moved[:3]:
            assert np.abs(t.as_matrix() - np.eye(4)).max() <= 1e-12

    def test_global_equivariance(self):
        model = four_link_chain()
        rng = np.random.default_rng(24)
        angles = rng.uniform(-0.2, 0.2, (3, 3))
        g = RigidTransform(rotation_about_axis([1, 2, 3], 0.4), [5.0, 6.0, 7.0])
        with_g = forward_kinematics(model, ArticulatedPose(angles, g))
        without = forward_kinematics(model, ArticulatedPose(angles))
        for a, b in zip(with_g, without):
            assert np.abs(a.as_matrix() - g.compose(b).as_matrix()).max() < 1e-9

    def test_dimension_mismatch_rejected(self):
        model = four_link_chain()
        with pytest.raises(DimensionMismatchError):
            forward_kinematics(model, ArticulatedPose(np.zeros((2, 3))))


class TestDeformMesh:
    def test_zero_pose_identity_on_vertices(self):
        model = four_link_chain()
        out = deform_mesh(model, ArticulatedPose.zero(model))
        assert np.abs(out.vertices - model.full_mesh().vertices).max() <= 1e-9

    def test_intra_vertebra_distances_preserved(self):
        model = four_link_chain()
        rng = np.random.default_rng(25)
        pose = ArticulatedPose(rng.uniform(-0.25, 0.25, (3, 3)),
                               RigidTransform(rotation_about_axis([0, 1, 0], 0.2), [1, 2, 3]))
        out = deform_mesh(model, pose)
        offset = 0
        for link in model.links:
            n = link.mesh.n_vertices
            orig, moved = link.mesh.vertices, out.vertices[offset:offset + n]
            d_orig = np.linalg.norm(orig[:, None] - orig[None, :], axis=2)
            d_new = np.linalg.norm(moved[:, None] - moved[None, :], axis=2)
            assert np.abs(d_orig - d_new).max() < 1e-6
            offset += n

    def test_matches_manual_transform_application(self):
        model = four_link_chain()
        rng = np.random.default_rng(26)
        pose = ArticulatedPose(rng.uniform(-0.2, 0.2, (3, 3)))
        transforms = forward_kinematics(model, pose)
        manual = np.vstack([t.apply(link.mesh.vertices)
                            for link, t in zip(model.links, transforms)])
        assert np.abs(deform_mesh(model, pose).vertices - manual).max() <= 1e-9


class TestClampPose:
    def test_in_limits_unchanged(self):
        model = four_link_chain()
        pose = ArticulatedPose(np.full((3, 3), 0.01))
        out = clamp_pose(model, pose)
        assert np.array_equal(out.joint_angles, pose.joint_angles)

    def test_clamps_to_limit(self):
        model = four_link_chain()
        angles = np.zeros((3, 3))
        angles[0, 0] = np.radians(30.0)
        out = clamp_pose(model, ArticulatedPose(angles))
        assert abs(out.joint_angles[0, 0] - np.radians(13.0)) < 1e-12
        assert abs(out.joint_angles[0, 0] - 0.2269) < 1e-4

    def test_exactly_at_limits_unchanged(self):
        model = four_link_chain()
        limits = np.stack([j.limits for j in model.joints])
        pose = ArticulatedPose(limits[..., 1])
        out = clamp_pose(model, pose)
        assert np.array_equal(out.joint_angles, pose.joint_angles)
        assert pose_within_limits(model, out)

    def test_global_passes_through(self):
        model = four_link_chain()
        g = RigidTransform(np.eye(3), [100.0, 0.0, 0.0])
        out = clamp_pose(model, ArticulatedPose(np.zeros((3, 3)), g))
        assert np.array_equal(out.global_transform.translation, g.translation)


class TestSerialization:
    def test_model_roundtrip(self, tmp_path):
        model = four_link_chain()
        path = save_model(model, tmp_path / "model")
        back = load_model(path)
        assert back.labels == model.labels
        for j0, j1 in zip(model.joints, back.joints):
            assert np.abs(j0.position - j1.position).max() < 1e-9
            assert np.abs(j0.axes - j1.axes).max() < 1e-12
            assert np.abs(j0.limits - j1.limits).max() < 1e-12
        for l0, l1 in zip(model.links, back.links):
            assert np.abs(l0.mesh.vertices - l1.mesh.vertices).max() < 1e-9

    def test_pose_json_roundtrip(self):
        pose = ArticulatedPose([[0.1, -0.05, 0.02]],
                               RigidTransform(rotation_about_axis([0, 0, 1], 0.3), [1, 2, 3]))
        back = ArticulatedPose.from_json_dict(pose.to_json_dict())
        assert np.abs(back.joint_angles - pose.joint_angles).max() == 0.0
        assert np.abs(back.global_transform.as_matrix()
                      - pose.global_transform.as_matrix()).max() == 0.0

    def test_default_limits_match_declared_degrees(self):
        limits = default_joint_limits()
        assert np.allclose(np.degrees(limits[:, 1]), [13.0, 6.0, 3.0])
        assert np.allclose(limits[:, 0], -limits[:, 1])


def test_vertebra_link_centroid_checked():
    mesh = box_vertebra([0, 0, 0])
    with pytest.raises(ValueError, match="centroid"):
        VertebraLink("L1", mesh, centroid=mesh.centroid() + 1.0)
