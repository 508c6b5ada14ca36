import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geomask.geometry import (
    DegenerateInputError,
    PointCloud,
    adaptive_radius,
    farthest_point_sample,
    geometric_variation,
    geometry_profile,
    local_covariance,
    normal_and_curvature,
    radius_neighborhoods,
)


def brute_fps(pts, m):
    start = int(np.argmin([np.sum((p - pts.mean(axis=0)) ** 2) for p in pts]))
    chosen = [start]
    for _ in range(1, m):
        best, best_d = None, -1.0
        for i in range(len(pts)):
            if i in chosen:
                continue
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def brute_neighbours(centers, r):
    out = []
    for i in range(len(centers)):
        out.append({j for j in range(len(centers)) if np.sqrt(np.sum((centers[i] - centers[j]) ** 2)) <= r})
    return out


def brute_radius(centers, eta):
    nn = []
    for i in range(len(centers)):
        nn.append(min(np.linalg.norm(centers[i] - centers[j]) for j in range(len(centers)) if j != i))
    return eta * float(np.mean(nn))


class TestPointCloud:
    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.nan, 0.0]]))

    def test_label_length(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((3, 3)), labels=[True, False])


class TestFarthestPointSampling:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for trial in range(20):
            pts = rng.standard_normal((int(rng.integers(5, 60)), 3))
            m = int(rng.integers(1, len(pts) + 1))
            assert farthest_point_sample(pts, m).tolist() == brute_fps(pts, m)

    def test_ties_go_to_lowest_index(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], float)
        assert farthest_point_sample(pts, 3).tolist() == [0, 1, 2]

    def test_duplicates_never_repeat(self):
        pts = np.zeros((4, 3))
        assert sorted(farthest_point_sample(pts, 4).tolist()) == [0, 1, 2, 3]

    def test_bad_count(self):
        with pytest.raises(ValueError):
            farthest_point_sample(np.zeros((3, 3)), 4)


class TestNeighbourhoods:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 80), st.floats(0.01, 3.0), st.integers(0, 2**32 - 1))
    def test_set_equal_to_scan(self, m, r, seed):
        centers = np.random.default_rng(seed).standard_normal((m, 3))
        got = radius_neighborhoods(centers, r)
        for a, b in zip(got, brute_neighbours(centers, r)):
            assert set(a.tolist()) == b

    def test_boundary_is_inclusive(self):
        centers = np.array([[0.0, 0, 0], [0.5, 0, 0], [1.0, 0, 0]])
        assert radius_neighborhoods(centers, 0.5)[0].tolist() == [0, 1]

    def test_zero_radius_groups_duplicates(self):
        centers = np.array([[1.0, 2, 3], [0, 0, 0], [1.0, 2, 3]])
        assert [n.tolist() for n in radius_neighborhoods(centers, 0.0)] == [[0, 2], [1], [0, 2]]

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            radius_neighborhoods(np.zeros((2, 3)), -1.0)

    def test_adaptive_radius_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            centers = rng.standard_normal((int(rng.integers(2, 50)), 3))
            assert abs(adaptive_radius(centers, 7.0) - brute_radius(centers, 7.0)) < 1e-12

    def test_adaptive_radius_needs_two(self):
        with pytest.raises(DegenerateInputError):
            adaptive_radius(np.zeros((1, 3)), 7.0)


class TestNormals:
    def test_plane(self):
        rng = np.random.default_rng(2)
        n_true = np.array([1.0, 2.0, 2.0]) / 3.0
        u = np.cross(n_true, [1.0, 0, 0])
        u /= np.linalg.norm(u)
        v = np.cross(n_true, u)
        ab = rng.standard_normal((200, 2))
        pts = ab[:, :1] * u + ab[:, 1:] * v + 5.0
        n, curv, _ = normal_and_curvature(local_covariance(pts)[0])
        assert curv < 1e-6
        assert np.arccos(min(1.0, abs(n @ n_true))) < 1e-4
        assert n[np.argmax(np.abs(n))] > 0

    def test_curvature_of_isotropic_cloud(self):
        # three equal eigenvalues give the maximum surface variation of 1/3
        _, curv, lam = normal_and_curvature(np.eye(3) * 2.0)
        assert curv == pytest.approx(1 / 3)
        np.testing.assert_allclose(lam, [2.0, 2.0, 2.0])

    def test_isotropic_tie_prefers_z(self):
        n, _, _ = normal_and_curvature(np.eye(3))
        np.testing.assert_allclose(n, [0, 0, 1], atol=1e-12)

    def test_line_tie_prefers_z_within_eigenspace(self):
        # a line along z: the null space is the xy plane, so +y wins
        n, _, _ = normal_and_curvature(np.diag([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(n, [0, 1, 0], atol=1e-12)

    def test_zero_covariance(self):
        n, curv, _ = normal_and_curvature(np.zeros((3, 3)))
        assert curv == 0.0
        assert np.linalg.norm(n) == pytest.approx(1.0)

    def test_covariance_uses_population_divisor(self):
        cov, mu = local_covariance(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
        assert cov[0, 0] == 1.0
        np.testing.assert_array_equal(mu, [1.0, 0, 0])

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            normal_and_curvature(np.array([[1.0, 1, 0], [0, 1, 0], [0, 0, 1]]))


class TestGeometricVariation:
    def test_hand_example(self):
        normals = np.array([[0.0, 0, 1], [0.0, 1, 0]])
        curv = np.array([0.0, 0.1])
        nbs = [np.array([0, 1]), np.array([0, 1])]
        vn, vc, vg = geometric_variation(normals, curv, nbs, alpha=1.0, beta=10.0)
        np.testing.assert_allclose(vn, [np.pi / 4, np.pi / 4])
        np.testing.assert_allclose(vc, [0.05, 0.05])
        np.testing.assert_allclose(vg, vn + 0.5)

    def test_antiparallel_normals_agree(self):
        vn, _, _ = geometric_variation(np.array([[0, 0, 1.0], [0, 0, -1.0]]), np.zeros(2),
                                       [np.array([0, 1])] * 2)
        np.testing.assert_array_equal(vn, [0.0, 0.0])

    def test_flat_cloud_has_no_variation(self):
        rng = np.random.default_rng(3)
        pts = np.c_[rng.random((400, 2)), np.zeros(400)]
        prof = geometry_profile(pts, 32)
        assert prof.var_geom.max() < 1e-9

    @pytest.mark.parametrize("s", [1e-3, 0.37, 250.0])
    def test_scale_invariance(self, s):
        pts = np.random.default_rng(4).standard_normal((300, 3))
        a = geometry_profile(pts, 40)
        b = geometry_profile(pts * s, 40)
        assert a.center_indices.tolist() == b.center_indices.tolist()
        np.testing.assert_allclose(b.var_geom, a.var_geom, atol=1e-9, rtol=0)

    def test_profile_shapes(self):
        pts = np.random.default_rng(5).standard_normal((200, 3))
        prof = geometry_profile(PointCloud(pts), 16)
        assert prof.normals.shape == (16, 3) and prof.var_geom.shape == (16,)
        assert all(i in nb for i, nb in enumerate(prof.neighborhoods))
        assert np.all(prof.curvatures <= 1 / 3 + 1e-15)


def test_neighbourhood_property_all_pairs_symmetric():
    centers = np.random.default_rng(6).random((60, 3))
    nbs = radius_neighborhoods(centers, 0.3)
    for i, j in itertools.product(range(60), repeat=2):
        assert (j in nbs[i]) == (i in nbs[j])
