"""Tests for depth back-projection, normal estimation and subsampling."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppf.geometry import Pose
from ppf.preprocess import (
    DepthImage,
    EmptyCloudError,
    Intrinsics,
    OrientedPointCloud,
    auto_stride,
    depth_normal_map,
    depth_to_cloud,
    estimate_normals,
    subsample,
    subsample_mask,
)
from ppf.verify import render_depth

K = Intrinsics(500.0, 500.0, 20.0, 15.0)


def brute_subsample(points, normals, min_dist, keep_angle):
    """Quadratic reference for the greedy keep rule."""
    kept = []
    cos_keep = math.cos(keep_angle)
    for i in range(len(points)):
        ok = True
        for j in kept:
            if np.sum((points[i] - points[j]) ** 2) < min_dist**2 and normals[i] @ normals[j] >= cos_keep:
                ok = False
                break
        if ok:
            kept.append(i)
    return np.array(kept, dtype=int)


def random_cloud(rng, n, scale=0.05):
    n_ = rng.normal(size=(n, 3))
    return OrientedPointCloud(rng.uniform(0, scale, size=(n, 3)), n_ / np.linalg.norm(n_, axis=1, keepdims=True))


class TestTypes:
    def test_intrinsics_reject_nonpositive_focal(self):
        with pytest.raises(ValueError):
            Intrinsics(0.0, 1.0, 0.0, 0.0)

    def test_depth_rejects_negative_and_nan(self):
        with pytest.raises(ValueError):
            DepthImage(np.array([[0.0, -1.0]]))
        with pytest.raises(ValueError):
            DepthImage(np.array([[np.nan, 1.0]]))

    def test_cloud_length_mismatch(self):
        with pytest.raises(ValueError):
            OrientedPointCloud(np.zeros((3, 3)), np.zeros((2, 3)))

    def test_transformed_moves_points_and_normals(self):
        c = OrientedPointCloud([[1.0, 0, 0]], [[0, 0, 1.0]])
        P = Pose(np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1.0]]), [0, 0, 1.0])
        out = c.transformed(P)
        np.testing.assert_allclose(out.points, [[0, 1, 1]])
        np.testing.assert_allclose(out.normals, [[0, 0, 1]])


class TestDepthToCloud:
    def test_principal_point(self):
        d = np.zeros((30, 40))
        d[15, 20] = 1.0
        c = depth_to_cloud(DepthImage(d), K)
        np.testing.assert_allclose(c.points, [[0, 0, 1]])
        np.testing.assert_array_equal(c.pixels, [[20, 15]])
        assert c.normals is None

    def test_one_focal_length_off_center(self):
        K2 = Intrinsics(10.0, 10.0, 5.0, 5.0)
        d = np.zeros((20, 20))
        d[5, 15] = 1.0
        np.testing.assert_allclose(depth_to_cloud(DepthImage(d), K2).points, [[1, 0, 1]])

    def test_all_invalid_is_empty(self):
        assert len(depth_to_cloud(DepthImage.empty(40, 30), K)) == 0

    def test_projection_round_trip(self, rng):
        d = rng.uniform(0.5, 2.0, size=(30, 40))
        d[rng.uniform(size=d.shape) < 0.3] = 0
        c = depth_to_cloud(DepthImage(d), K)
        np.testing.assert_allclose(K.project(c.points), c.pixels, atol=1e-9)
        assert len(c) == np.count_nonzero(d)

    def test_stride(self):
        c = depth_to_cloud(DepthImage(np.ones((30, 40))), K, stride=4)
        assert len(c) == 8 * 10
        assert np.all(c.pixels % 4 == 0)

    def test_auto_stride(self):
        img = DepthImage(np.full((30, 40), 1.0))
        assert auto_stride(img, K, 0.01) == 5
        assert auto_stride(DepthImage.empty(4, 4), K, 0.01) == 1


class TestEstimateNormals:
    def test_plane_faces_viewpoint(self, rng):
        g = np.stack(np.meshgrid(np.linspace(0, 0.1, 15), np.linspace(0, 0.1, 15)), -1).reshape(-1, 2)
        c = OrientedPointCloud(np.column_stack([g, np.zeros(len(g))]))
        out = estimate_normals(c, k=10, viewpoint=(0, 0, 1))
        assert len(out) == len(c)
        np.testing.assert_allclose(out.normals, np.tile([0, 0, 1.0], (len(c), 1)), atol=1e-6)
        out_down = estimate_normals(c, k=10, viewpoint=(0, 0, -1))
        np.testing.assert_allclose(out_down.normals[:, 2], -1.0, atol=1e-6)

    def test_sphere_normals_radial(self):
        n = 3000
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        th = math.pi * (1 + 5**0.5) * i
        d = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], 1)
        c = OrientedPointCloud(0.1 * d)
        out = estimate_normals(c, k=10, viewpoint=(0, 0, 0))
        # viewpoint at the center orients normals inward
        cosang = np.einsum("ij,ij->i", -out.normals, out.points / np.linalg.norm(out.points, axis=1, keepdims=True))
        assert np.degrees(np.arccos(np.clip(cosang, -1, 1))).max() < 5.0

    def test_two_points_dropped(self):
        c = OrientedPointCloud([[0, 0, 0], [1.0, 0, 0]])
        assert len(estimate_normals(c, k=3)) == 0

    def test_errors(self):
        with pytest.raises(EmptyCloudError):
            estimate_normals(OrientedPointCloud(np.zeros((0, 3))))
        with pytest.raises(ValueError):
            estimate_normals(OrientedPointCloud(np.zeros((5, 3))), k=2)

    def test_output_is_unit_and_oriented(self, rng):
        c = OrientedPointCloud(rng.normal(size=(400, 3)))
        vp = np.array([5.0, 0, 0])
        out = estimate_normals(c, k=8, viewpoint=vp)
        out.check()
        assert np.all(np.einsum("ij,ij->i", vp - out.points, out.normals) >= -1e-12)


class TestSubsample:
    def test_close_points_same_normal(self):
        c = OrientedPointCloud([[0, 0, 0], [0.001, 0, 0]], [[0, 0, 1.0], [0, 0, 1.0]])
        assert len(subsample(c, 0.005)) == 1

    def test_close_points_normals_45_degrees(self):
        s = math.sqrt(0.5)
        c = OrientedPointCloud([[0, 0, 0], [0.001, 0, 0]], [[0, 0, 1.0], [s, 0, s]])
        assert len(subsample(c, 0.005)) == 2

    def test_keep_angle_pi_ignores_normals(self):
        c = OrientedPointCloud([[0, 0, 0], [0.001, 0, 0]], [[0, 0, 1.0], [0, 0, -1.0]])
        assert len(subsample(c, 0.005, math.pi)) == 1

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_brute_force(self, seed):
        c = random_cloud(np.random.default_rng(seed), 500)
        got = np.nonzero(subsample_mask(c.points, c.normals, 0.008))[0]
        np.testing.assert_array_equal(got, brute_subsample(c.points, c.normals, 0.008, math.radians(30)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.002, 0.02))
    def test_kept_pairs_property(self, seed, md):
        c = random_cloud(np.random.default_rng(seed), 300)
        out = subsample(c, md)
        d = np.linalg.norm(out.points[:, None] - out.points[None], axis=2)
        cos = out.normals @ out.normals.T
        close = (d < md) & ~np.eye(len(out), dtype=bool)
        assert np.all(cos[close] < math.cos(math.radians(30)))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.002, 0.02))
    def test_idempotent(self, seed, md):
        once = subsample(random_cloud(np.random.default_rng(seed), 300), md)
        twice = subsample(once, md)
        np.testing.assert_array_equal(once.points, twice.points)

    def test_order_preserved_and_pixels_kept(self, rng):
        c = random_cloud(rng, 200)
        c.pixels = np.arange(400).reshape(200, 2)
        out = subsample(c, 0.01)
        idx = out.pixels[:, 0] // 2
        assert np.all(np.diff(idx) > 0)
        np.testing.assert_array_equal(out.points, c.points[idx])

    def test_errors(self):
        c = OrientedPointCloud([[0, 0, 0.0]], [[0, 0, 1.0]])
        with pytest.raises(ValueError):
            subsample(c, 0.0)
        with pytest.raises(ValueError):
            subsample(OrientedPointCloud([[0, 0, 0.0]]), 0.01)


class TestNormalMap:
    def test_fronto_parallel_plane(self):
        n = depth_normal_map(DepthImage(np.full((30, 40), 1.0)), K)
        np.testing.assert_allclose(n[10:20, 10:30], np.broadcast_to([0, 0, -1.0], (10, 20, 3)), atol=1e-9)

    def test_invalid_pixels_have_zero_normal(self):
        d = np.full((30, 40), 1.0)
        d[:, :20] = 0
        n = depth_normal_map(DepthImage(d), K)
        assert np.all(n[:, :20] == 0)


class TestRenderRoundTrip:
    def test_back_projection_of_render(self):
        g = np.stack(np.meshgrid(np.linspace(-0.05, 0.05, 60), np.linspace(-0.05, 0.05, 60)), -1).reshape(-1, 2)
        model = OrientedPointCloud(np.column_stack([g, np.zeros(len(g))]), np.tile([0, 0, -1.0], (len(g), 1)))
        K2 = Intrinsics(300.0, 300.0, 50.0, 40.0)
        pose = Pose(np.eye(3), [0, 0, 0.5])
        spacing = 0.1 / 59
        view = render_depth(model, pose, K2, (100, 80), spacing=spacing, splat_scale=0.6)
        c = depth_to_cloud(view.depth, K2)
        assert len(c) > 0
        # every rendered pixel lies on the plane z = 0.5, within one splat radius of a model point
        np.testing.assert_allclose(c.points[:, 2], 0.5, atol=1e-9)
        d = np.min(np.linalg.norm(c.points[:, None, :2] - model.points[None, :, :2], axis=2), axis=1)
        assert d.max() <= 0.6 * spacing + 1e-9
        # and every pixel whose ray passes within a splat radius of a model point is rendered
        v, u = np.mgrid[0:80, 0:100]
        ray = np.stack([(u - 50.0) / 300.0 * 0.5, (v - 40.0) / 300.0 * 0.5], -1).reshape(-1, 2)
        near = np.min(np.linalg.norm(ray[:, None] - model.points[None, :, :2], axis=2), axis=1) < 0.6 * spacing - 1e-9
        assert view.mask.reshape(-1)[near].all()
