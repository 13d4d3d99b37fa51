import numpy as np
import pytest

from spinereg.errors import SpineRegError
from spinereg.geometry import NeighborIndex, PointCloud
from spinereg.registration import (
    CorrespondenceSet, ObjectiveReport, build_correspondences, containment_score,
)


def delta_loop_oracle(pairs_normals, pairs_vectors):
    """Literal per-pair loop over the containment rule."""
    total = 0
    for n, v in zip(pairs_normals, pairs_vectors):
        total += 0 if float(np.dot(n, v)) >= 0.0 else 1
    return total / len(pairs_normals)


class TestBuildCorrespondences:
    def test_source_equals_target(self):
        rng = np.random.default_rng(41)
        pts = rng.uniform(0, 10, (30, 3))
        corrs = build_correspondences(pts, NeighborIndex(pts), threshold=8.0)
        assert len(corrs) == 30
        assert corrs.ratio == 1.0
        assert np.abs(corrs.distances).max() == 0.0
        assert np.array_equal(corrs.source_indices, corrs.target_indices)

    def test_out_of_threshold_excluded(self):
        target = NeighborIndex(np.array([[100.0, 0.0, 0.0]]))
        corrs = build_correspondences(np.array([[90.0, 0.0, 0.0]]), target, threshold=8.0)
        assert len(corrs) == 0 and corrs.ratio == 0.0

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(42)
        source = rng.uniform(0, 30, (200, 3))
        target = rng.uniform(0, 30, (500, 3))
        threshold = 4.0
        corrs = build_correspondences(source, NeighborIndex(target), threshold)
        d = np.linalg.norm(source[:, None] - target[None, :], axis=2)
        nn_d, nn_i = d.min(axis=1), d.argmin(axis=1)
        keep = np.flatnonzero(nn_d <= threshold)
        assert np.array_equal(corrs.source_indices, keep)
        assert np.array_equal(corrs.target_indices, nn_i[keep])
        assert np.abs(corrs.distances - nn_d[keep]).max() < 1e-12

    def test_invariants_enforced(self):
        with pytest.raises(ValueError, match="beyond"):
            CorrespondenceSet(np.array([0]), np.array([0]), np.array([9.0]),
                              source_size=1, threshold=8.0, target_has_normals=True)


class TestContainment:
    def scene_plane(self, n=20):
        rng = np.random.default_rng(43)
        pts = np.column_stack([rng.uniform(-10, 10, n), rng.uniform(-10, 10, n),
                               np.zeros(n)])
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        return PointCloud(pts, normals=normals)

    def test_source_below_surface_scores_zero(self):
        scene = self.scene_plane()
        source = scene.positions - [0.0, 0.0, 1.0]
        corrs = build_correspondences(source, NeighborIndex(scene.positions), 8.0)
        assert containment_score(corrs, source, scene) == 0.0

    def test_source_above_surface_scores_one(self):
        scene = self.scene_plane()
        source = scene.positions + [0.0, 0.0, 1.0]
        corrs = build_correspondences(source, NeighborIndex(scene.positions), 8.0)
        assert containment_score(corrs, source, scene) == 1.0

    def test_mixed_signs_arithmetic(self):
        # 5 pairs with dot signs (+, +, -, +, -) -> penalty 0.4
        scene = PointCloud(np.zeros((5, 3)) + [0, 0, 0],
                           normals=np.tile([0.0, 0.0, 1.0], (5, 1)))
        below, above = [0.0, 0.0, -1.0], [0.0, 0.0, 1.0]
        source = np.array([below, below, above, below, above]) + scene.positions
        corrs = CorrespondenceSet(np.arange(5), np.arange(5), np.ones(5),
                                  source_size=5, threshold=8.0, target_has_normals=True)
        assert containment_score(corrs, source, scene) == pytest.approx(0.4)

    def test_empty_set_worst_case(self):
        scene = self.scene_plane()
        corrs = CorrespondenceSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0),
                                  source_size=10, threshold=8.0, target_has_normals=True)
        assert containment_score(corrs, np.zeros((10, 3)), scene) == 1.0

    def test_missing_normals_rejected(self):
        scene = PointCloud(np.zeros((3, 3)))
        corrs = CorrespondenceSet(np.arange(3), np.arange(3), np.zeros(3),
                                  source_size=3, threshold=8.0, target_has_normals=False)
        with pytest.raises(SpineRegError, match="normals"):
            containment_score(corrs, np.zeros((3, 3)), scene)

    def test_matches_delta_loop_on_random_sets(self):
        rng = np.random.default_rng(44)
        for _ in range(50):
            n = rng.integers(1, 40)
            scene_pts = rng.uniform(-5, 5, (n, 3))
            normals = rng.normal(size=(n, 3))
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            scene = PointCloud(scene_pts, normals=normals)
            source = scene_pts + rng.normal(0, 2.0, (n, 3))
            corrs = CorrespondenceSet(np.arange(n), np.arange(n),
                                      np.zeros(n), source_size=n,
                                      threshold=8.0, target_has_normals=True)
            got = containment_score(corrs, source, scene)
            expected = delta_loop_oracle(normals, scene_pts - source)
            assert got == expected


class TestObjectiveReport:
    def test_equal_weight_blend(self):
        r = ObjectiveReport.from_terms(0.8, 0.3)
        assert r.combined == pytest.approx(0.5 * 0.2 + 0.5 * 0.3)

    def test_bounds_validated(self):
        with pytest.raises(ValueError):
            ObjectiveReport(1.5, 0.0, 0.0)

    def test_extremes(self):
        assert ObjectiveReport.from_terms(1.0, 0.0).combined == 0.0
        assert ObjectiveReport.from_terms(0.0, 1.0).combined == 1.0
