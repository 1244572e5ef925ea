"""Tests for synthetic models and scenes."""

import numpy as np
import pytest

from ppf.preprocess import depth_to_cloud
from ppf.synth import MODELS, SynthConfig, make_model, synth_scene
from scipy.spatial import cKDTree


class TestModels:
    @pytest.mark.parametrize("name", sorted(MODELS))
    def test_unit_outward_normals(self, name):
        m = make_model(name, 0.003)
        m.check()
        assert len(m) > 100
        # box-centered
        np.testing.assert_allclose(m.points.min(axis=0), -m.points.max(axis=0), atol=1e-12)

    def test_unknown(self):
        with pytest.raises(ValueError):
            make_model("teapot")


class TestScenes:
    def test_deterministic(self):
        cfg = SynthConfig(seed=4, clutter_fraction=0.3, noise_sigma=0.002, occluder_fraction=0.2)
        a, b = synth_scene(cfg), synth_scene(cfg)
        np.testing.assert_array_equal(a.depth.data, b.depth.data)
        assert a.gt == b.gt

    def test_seeds_differ(self):
        assert synth_scene(SynthConfig(seed=1)).gt != synth_scene(SynthConfig(seed=2)).gt

    def test_pose_range(self):
        for s in range(10):
            sc = synth_scene(SynthConfig(seed=s))
            assert 0.5 <= sc.gt.t[2] <= 1.5
            assert sc.K.fx == 575 and sc.depth.size == (640, 480)

    def test_clean_scene_on_model_surface(self, box_object):
        sc = synth_scene(SynthConfig(seed=8, plane=False), box_object.dense)
        pts = depth_to_cloud(sc.depth, sc.K).points
        d, _ = cKDTree(sc.gt.apply(box_object.dense.points)).query(pts)
        # splats have radius 0.75 x sampling; allow a little slack for grazing faces
        assert np.max(d) < 2 * 0.0015

    def test_occluder_removes_about_30_percent(self, box_object):
        base = synth_scene(SynthConfig(seed=9, plane=False), box_object.dense)
        occ = synth_scene(SynthConfig(seed=9, plane=False, occluder_fraction=0.3), box_object.dense)
        ratio = occ.info["visible_object_pixels"] / base.info["visible_object_pixels"]
        assert ratio == pytest.approx(0.7, abs=0.05)

    def test_clutter_fraction(self):
        sc = synth_scene(SynthConfig(seed=3, clutter_fraction=0.3))
        assert sc.info["clutter_pixels"] > 0.2 * sc.info["valid_pixels"]

    def test_config_round_trip(self):
        cfg = SynthConfig(seed=5, z_range=(0.6, 0.9), noise_sigma=0.001)
        assert SynthConfig.from_dict(cfg.to_dict()) == cfg
