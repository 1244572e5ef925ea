"""Tests for the voxel grid, vote flags, per-reference voting and raw detection."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ppf.geometry import Pose, canonical_rotation, compute_ppf, random_rotation
from ppf.model_table import build_model_table, point_set_diameter, quantize_ppf
from ppf.preprocess import EmptyCloudError, OrientedPointCloud, subsample
from ppf.synth import make_model
from ppf.voting import (
    Accumulator,
    DetectionParams,
    RadiusTooLargeError,
    VoteFlags,
    build_voxel_grid,
    detect_raw,
    extract_peaks,
    query_ball,
    try_set_flag,
    vote_reference_point,
)

PI = math.pi


def random_cloud(rng, n, scale=0.1):
    nrm = rng.normal(size=(n, 3))
    return OrientedPointCloud(rng.uniform(-scale, scale, size=(n, 3)), nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def reference_votes(ref, scene, table, params, radius, exclude=None):
    """Plain-Python voting for one reference point, used as an oracle."""
    n_alpha = params.n_alpha_bins
    step = 2 * PI / n_alpha
    counts = np.zeros((table.n_model_points, n_alpha), np.int64)
    _, a_off = table.vote_arrays(n_alpha)
    flags = set()
    p, n = scene.points, scene.normals
    Rr = canonical_rotation(n[ref])
    for j in range(len(p)):
        d = np.linalg.norm(p[j] - p[ref])
        if j == ref or d > radius or (exclude is not None and d <= exclude):
            continue
        key = quantize_ppf(compute_ppf(p[ref], n[ref], p[j], n[j]), table.quant).index(table.quant)
        loc = Rr @ (p[j] - p[ref])
        a_s = (-math.atan2(loc[2], loc[1]) + PI) % (2 * PI) - PI
        a_bin = int(math.floor((a_s + PI) / step)) % n_alpha
        for da in (-1, 0, 1) if params.spreading_rotation else (0,):
            ab = (a_bin + da) % n_alpha
            if params.flags_enabled and params.flag_key == "scene":
                if (key, ab) in flags:
                    continue
                flags.add((key, ab))
            for k in table.lookup_keys(key):
                if params.flags_enabled and params.flag_key == "bucket":
                    if (k, ab) in flags:
                        continue
                    flags.add((k, ab))
                lo, hi = table.offsets[k], table.offsets[k + 1]
                for e in range(lo, hi):
                    b = int(a_off[e] + 4.0 * n_alpha - a_s / step - da) % n_alpha
                    counts[table.model_index[e], b] += 1
    return counts


def run_vote(ref, scene, table, params, radius, exclude=None):
    grid = build_voxel_grid(scene, radius)
    acc = Accumulator(table.n_model_points, params.n_alpha_bins)
    flags = VoteFlags(table.quant.n_keys, params.n_alpha_bins)
    stats = vote_reference_point(ref, scene, grid, table, params, radius, exclude, acc, flags)
    return acc.counts.astype(np.int64), stats


class TestVoxelGrid:
    pts = np.array([[0, 0, 0], [0.05, 0, 0], [1.0, 0, 0]])

    def test_cells(self):
        g = build_voxel_grid(self.pts, 0.1)
        assert g.voxel_coords(self.pts[0]).tolist() == [0, 0, 0]
        assert g.point_to_voxel[0] == g.point_to_voxel[1]
        assert g.unflat(int(g.point_to_voxel[2])) == (10, 0, 0)

    def test_negative_coordinates(self, rng):
        g = build_voxel_grid(rng.uniform(-5, -1, size=(100, 3)), 0.3)
        assert np.all(g.voxel_coords(g.points) >= 0)

    def test_every_point_once_and_recomputable(self, rng):
        pts = rng.normal(size=(500, 3))
        g = build_voxel_grid(pts, 0.25)
        assert sorted(g.cell_points.tolist()) == list(range(500))
        for i in range(500):
            assert g.flat(g.voxel_coords(pts[i])) == g.point_to_voxel[i]
        for v, members in g.cells.items():
            assert np.all(g.point_to_voxel[members] == v)

    def test_errors(self):
        with pytest.raises(EmptyCloudError):
            build_voxel_grid(np.zeros((0, 3)), 0.1)
        with pytest.raises(ValueError):
            build_voxel_grid(self.pts, 0.0)


class TestQueryBall:
    def test_example(self):
        g = build_voxel_grid(TestVoxelGrid.pts, 0.1)
        assert query_ball(g, 0, 0.1).tolist() == [1]

    def test_small_radius_empty(self):
        g = build_voxel_grid(TestVoxelGrid.pts, 0.1)
        assert query_ball(g, 0, 0.01).size == 0

    def test_radius_larger_than_cell(self):
        g = build_voxel_grid(TestVoxelGrid.pts, 0.1)
        with pytest.raises(RadiusTooLargeError):
            query_ball(g, 0, 0.2)

    def test_brute_force(self, rng):
        pts = rng.uniform(0, 1, size=(1000, 3))
        g = build_voxel_grid(pts, 0.12)
        for c in rng.integers(0, 1000, 100):
            r = rng.uniform(0.01, 0.12)
            d = np.linalg.norm(pts - pts[c], axis=1)
            want = np.nonzero(d <= r)[0]
            np.testing.assert_array_equal(query_ball(g, c, r), want[want != c])


class TestVoteFlags:
    def test_examples(self):
        f = VoteFlags(22**3 * 40)
        assert try_set_flag(f, 7, 5)
        assert not try_set_flag(f, 7, 5)
        assert try_set_flag(f, 7, 6)
        assert f.touched_indices.tolist() == [7]

    def test_bin_out_of_range(self):
        f = VoteFlags(100, 32)
        with pytest.raises(ValueError):
            f.try_set(3, 32)
        with pytest.raises(ValueError):
            VoteFlags(100, 33)

    @settings(max_examples=50)
    @given(st.lists(st.tuples(st.integers(0, 63), st.integers(0, 31)), max_size=300))
    def test_matches_set_oracle(self, ops):
        f = VoteFlags(64)
        seen = set()
        for key, b in ops:
            assert f.try_set(key, b) == ((key, b) not in seen)
            seen.add((key, b))
        assert set(f.touched_indices.tolist()) == {k for k, _ in seen}
        f.reset()
        assert not f.bits.any() and f.touched_indices.size == 0
        if ops:
            assert f.try_set(*ops[0])


class TestVoteReferencePoint:
    def test_two_point_self_match(self):
        m = OrientedPointCloud([[0, 0, 0], [0.1, 0.05, 0.02]], [[0, 0, 1.0], [0, 1.0, 0]])
        t = build_model_table(m)
        p = DetectionParams()
        counts, _ = run_vote(0, m, t, p, 1.01 * t.d_obj)
        zero_bin = int(math.floor(PI / p.alpha_step))
        assert counts[0, zero_bin] >= 1
        assert counts[0, zero_bin] == counts.max()

    @pytest.mark.parametrize(
        "kw",
        [
            dict(flags_enabled=False),
            dict(flags_enabled=True, flag_key="scene"),
            dict(flags_enabled=True, flag_key="bucket"),
            dict(flags_enabled=True, spreading_rotation=False),
        ],
    )
    def test_matches_python_oracle(self, rng, kw):
        model = random_cloud(rng, 25)
        scene = random_cloud(rng, 60)
        t = build_model_table(model)
        p = DetectionParams(**kw)
        for ref in (0, 7, 33):
            got, _ = run_vote(ref, scene, t, p, t.d_obj)
            want = reference_votes(ref, scene, t, p, t.d_obj)
            np.testing.assert_array_equal(got, want)

    def test_annulus_matches_oracle(self, rng):
        model, scene = random_cloud(rng, 20), random_cloud(rng, 60)
        t = build_model_table(model)
        p = DetectionParams()
        got, _ = run_vote(5, scene, t, p, t.d_obj, 0.5 * t.d_obj)
        np.testing.assert_array_equal(got, reference_votes(5, scene, t, p, t.d_obj, 0.5 * t.d_obj))

    def test_flags_only_suppress(self, rng):
        model = random_cloud(rng, 20)
        # duplicated points make coincident quantized pairs
        base = random_cloud(rng, 30)
        scene = OrientedPointCloud(np.vstack([base.points, base.points + 1e-5]), np.vstack([base.normals, base.normals]))
        t = build_model_table(model)
        on, _ = run_vote(0, scene, t, DetectionParams(flags_enabled=True), t.d_obj)
        off, _ = run_vote(0, scene, t, DetectionParams(flags_enabled=False), t.d_obj)
        assert np.all(on <= off)
        assert on.sum() < off.sum()

    def test_empty_annulus(self, rng):
        model, scene = random_cloud(rng, 20), random_cloud(rng, 40)
        t = build_model_table(model)
        counts, stats = run_vote(0, scene, t, DetectionParams(), t.d_obj, t.d_obj)
        assert counts.sum() == 0 and stats["votes"] == 0

    def test_table_spreading_only_adds_votes(self, rng):
        model = random_cloud(rng, 25)
        t_on = build_model_table(model, spreading=True)
        t_off = build_model_table(model, spreading=False)
        p = DetectionParams()
        for ref in range(5):
            on, _ = run_vote(ref, model, t_on, p, t_on.d_obj)
            off, _ = run_vote(ref, model, t_off, p, t_off.d_obj)
            assert np.all(on >= off)


class TestExtractPeaks:
    def make(self, cells):
        m = random_cloud(np.random.default_rng(0), 6)
        t = build_model_table(m)
        acc = Accumulator(6, 32)
        for (i, b), v in cells.items():
            acc.counts[i, b] = v
        return extract_peaks(acc, 0, DetectionParams(), t, m)

    def test_single_peak(self):
        h = self.make({(3, 5): 10, (2, 1): 9})
        assert len(h) == 1
        assert h[0].model_ref_index == 3 and h[0].votes == 10

    def test_tie(self):
        h = self.make({(3, 5): 10, (2, 1): 10})
        assert sorted(x.model_ref_index for x in h) == [2, 3]

    def test_noise_floor(self):
        assert len(self.make({(3, 5): 2, (2, 1): 2})) == 0

    def test_alpha_bin_center(self):
        h = self.make({(1, 0): 5})
        assert h[0].alpha == pytest.approx(-PI + 0.5 * 2 * PI / 32)
        assert h[0].pose.is_valid()


class TestDetectRaw:
    def test_r_min_formula(self, rng):
        t = build_model_table(random_cloud(rng, 10), dims=(0.1, 0.2, 0.3))
        assert t.r_min == pytest.approx(math.sqrt(0.05))

    def test_fewer_than_two_points(self, box_object):
        one = OrientedPointCloud([[0, 0, 1.0]], [[0, 0, -1.0]])
        raw = detect_raw(one, box_object.table)
        assert len(raw.small) == 0 and len(raw.large) == 0

    def test_deterministic(self, box_object):
        scene = box_object.table.model_cloud.transformed(Pose(random_rotation(np.random.default_rng(1)), [0, 0, 1.0]))
        a = detect_raw(scene, box_object.table)
        b = detect_raw(scene, box_object.table)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.R, y.R)
            np.testing.assert_array_equal(x.votes, y.votes)
            np.testing.assert_array_equal(x.scene_ref, y.scene_ref)

    def test_balls_labelled(self, box_object):
        scene = box_object.table.model_cloud.transformed(Pose(random_rotation(np.random.default_rng(2)), [0, 0, 1.0]))
        raw = detect_raw(scene, box_object.table)
        assert len(raw.small) > 0 and len(raw.large) > 0
        assert all(h.ball == "small" for h in raw.small)
        assert all(h.votes >= 3 for h in raw.all())
        one = detect_raw(scene, box_object.table, DetectionParams(two_balls=False))
        assert len(one.small) == 0

    def test_clean_self_match_rate(self):
        """A posed copy of the model yields a hypothesis near the true pose in >= 95 of 100 trials."""
        dense = make_model("bracket", 0.003)

        d = point_set_diameter(dense.points)
        model = subsample(dense, 0.07 * d)
        table = build_model_table(model, d)
        rng = np.random.default_rng(0)
        hits = 0
        for _ in range(100):
            G = Pose(random_rotation(rng), rng.normal(size=3))
            raw = detect_raw(model.transformed(G), table, DetectionParams(reference_stride=3))
            hs = raw.all()
            dt = np.linalg.norm(hs.t - G.t, axis=1)
            cosang = (np.einsum("nij,ij->n", hs.R, G.R) - 1) / 2
            ang = np.arccos(np.clip(cosang, -1, 1))
            hits += bool(np.any((dt <= 0.05 * d) & (ang <= math.radians(12))))
        assert hits >= 95
