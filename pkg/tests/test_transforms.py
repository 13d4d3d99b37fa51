import numpy as np
import pytest

from spinereg.errors import DegenerateGeometryError
from spinereg.geometry import RigidTransform, rotation_about_axis


def random_transform(rng):
    axis = rng.normal(size=3)
    angle = rng.uniform(-np.pi, np.pi)
    return RigidTransform(rotation_about_axis(axis, angle), rng.uniform(-50, 50, 3))


def test_identity_defaults():
    t = RigidTransform.identity()
    p = np.array([1.0, 2.0, 3.0])
    assert np.allclose(t.apply(p), p)


def test_rotation_about_axis_matches_analytic_z():
    theta = 0.3
    got = rotation_about_axis([0, 0, 1], theta)
    expected = np.array([
        [np.cos(theta), -np.sin(theta), 0.0],
        [np.sin(theta), np.cos(theta), 0.0],
        [0.0, 0.0, 1.0],
    ])
    assert np.abs(got - expected).max() < 1e-12


def test_zero_axis_rejected():
    with pytest.raises(DegenerateGeometryError):
        rotation_about_axis([0, 0, 0], 1.0)


def test_invert_roundtrip_within_1e9():
    rng = np.random.default_rng(7)
    for _ in range(50):
        t = random_transform(rng)
        p = rng.uniform(-100, 100, (20, 3))
        assert np.abs(t.invert().apply(t.apply(p)) - p).max() < 1e-9


def test_compose_is_associative():
    rng = np.random.default_rng(8)
    for _ in range(20):
        a, b, c = (random_transform(rng) for _ in range(3))
        p = rng.uniform(-10, 10, (5, 3))
        left = a.compose(b).compose(c).apply(p)
        right = a.compose(b.compose(c)).apply(p)
        assert np.abs(left - right).max() < 1e-9


def test_compose_order_applies_other_first():
    move = RigidTransform(np.eye(3), [1.0, 0.0, 0.0])
    spin = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), [0.0, 0.0, 0.0])
    # spin after move: (1,0,0) -> (2,0,0) -> (0,2,0)
    assert np.allclose(spin.compose(move).apply([1.0, 0.0, 0.0]), [0.0, 2.0, 0.0])


def test_non_orthonormal_rotation_rejected():
    bad = np.eye(3)
    bad[0, 1] = 1e-3
    with pytest.raises(ValueError):
        RigidTransform(bad, np.zeros(3))


def test_reflection_rejected():
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        RigidTransform(refl, np.zeros(3))


def test_about_point_fixes_the_point():
    rng = np.random.default_rng(9)
    point = rng.uniform(-10, 10, 3)
    t = RigidTransform.about_point(rotation_about_axis(rng.normal(size=3), 0.7), point)
    assert np.abs(t.apply(point) - point).max() < 1e-9


def test_matrix_roundtrip():
    rng = np.random.default_rng(10)
    t = random_transform(rng)
    back = RigidTransform.from_matrix(t.as_matrix())
    assert np.abs(back.rotation - t.rotation).max() < 1e-12
    assert np.abs(back.translation - t.translation).max() < 1e-12


def test_rotation_angle():
    t = RigidTransform(rotation_about_axis([1, 1, 0], 0.42), np.zeros(3))
    assert abs(t.rotation_angle() - 0.42) < 1e-12


def test_arrays_are_immutable():
    t = RigidTransform.identity()
    with pytest.raises(ValueError):
        t.translation[0] = 5.0
