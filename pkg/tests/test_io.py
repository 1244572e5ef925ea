"""Tests for PLY, depth PNG, intrinsics, pose JSON and the dataset layout."""

import json

import numpy as np
import pytest

from ppf.geometry import Pose, random_rotation
from ppf.io import (
    GroundTruthPose,
    MissingGroundTruthError,
    PlyParseError,
    UnsupportedFormatError,
    load_depth_png,
    load_ground_truth,
    load_intrinsics,
    load_ply,
    open_dataset,
    pose_from_json,
    pose_to_json,
    save_depth_png,
    save_ground_truth,
    save_intrinsics,
    save_ply,
    write_frame,
)
from ppf.preprocess import DepthImage, Intrinsics, OrientedPointCloud

ASCII_PLY = """ply
format ascii 1.0
comment three vertices with normals
element vertex 3
property float x
property float y
property float z
property float nx
property float ny
property float nz
element face 1
property list uchar int vertex_indices
end_header
0 0 0 0 0 1
1 0 0 0 0 1
0 1 0 0 0 1
3 0 1 2
"""


def write(path, text):
    path.write_text(text)
    return path


class TestPly:
    def test_ascii_with_normals(self, tmp_path):
        c = load_ply(write(tmp_path / "a.ply", ASCII_PLY))
        assert len(c) == 3
        np.testing.assert_allclose(c.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
        np.testing.assert_allclose(c.normals, np.tile([0, 0, 1.0], (3, 1)))

    def test_binary_matches_ascii(self, tmp_path):
        a = load_ply(write(tmp_path / "a.ply", ASCII_PLY))
        save_ply(a, tmp_path / "b.ply", binary=True)
        b = load_ply(tmp_path / "b.ply")
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.normals, b.normals)

    @pytest.mark.parametrize("binary", [False, True])
    def test_round_trip(self, tmp_path, rng, binary):
        n = rng.normal(size=(50, 3))
        c = OrientedPointCloud(rng.normal(size=(50, 3)), n / np.linalg.norm(n, axis=1, keepdims=True))
        save_ply(c, tmp_path / "c.ply", binary=binary)
        d = load_ply(tmp_path / "c.ply")
        np.testing.assert_allclose(d.points, c.points, rtol=0, atol=1e-15)
        np.testing.assert_allclose(d.normals, c.normals, atol=1e-15)

    def test_without_normals(self, tmp_path):
        text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n"
        c = load_ply(write(tmp_path / "n.ply", text))
        assert len(c) == 2 and not c.has_normals

    def test_binary_with_preceding_element(self, tmp_path):
        head = b"ply\nformat binary_little_endian 1.0\nelement camera 1\nproperty float f\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
        body = np.array([9.0], "<f4").tobytes() + np.arange(6, dtype="<f4").tobytes()
        (tmp_path / "c.ply").write_bytes(head + body)
        np.testing.assert_allclose(load_ply(tmp_path / "c.ply").points, [[0, 1, 2], [3, 4, 5]])

    def test_not_a_ply(self, tmp_path):
        with pytest.raises(PlyParseError):
            load_ply(write(tmp_path / "x.ply", "hello\n"))

    def test_short_vertex_line(self, tmp_path):
        text = ASCII_PLY.replace("1 0 0 0 0 1", "1 0 0")
        with pytest.raises(PlyParseError) as e:
            load_ply(write(tmp_path / "s.ply", text))
        assert e.value.line == 15

    def test_non_numeric(self, tmp_path):
        with pytest.raises(PlyParseError):
            load_ply(write(tmp_path / "s.ply", ASCII_PLY.replace("0 1 0 0 0 1", "0 one 0 0 0 1")))

    def test_truncated_binary(self, tmp_path, rng):
        c = OrientedPointCloud(rng.normal(size=(10, 3)))
        save_ply(c, tmp_path / "c.ply", binary=True)
        data = (tmp_path / "c.ply").read_bytes()
        (tmp_path / "t.ply").write_bytes(data[:-5])
        with pytest.raises(PlyParseError) as e:
            load_ply(tmp_path / "t.ply")
        assert e.value.offset is not None

    def test_big_endian_unsupported(self, tmp_path):
        with pytest.raises(UnsupportedFormatError):
            load_ply(write(tmp_path / "b.ply", ASCII_PLY.replace("format ascii 1.0", "format binary_big_endian 1.0")))

    def test_missing_coordinates(self, tmp_path):
        text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n"
        with pytest.raises(PlyParseError):
            load_ply(write(tmp_path / "m.ply", text))


class TestDepthPng:
    def test_round_trip_mm(self, tmp_path, rng):
        d = np.round(rng.uniform(0.3, 3.0, size=(20, 30)), 3)
        d[0, :5] = 0
        save_depth_png(DepthImage(d), tmp_path / "d.png")
        np.testing.assert_allclose(load_depth_png(tmp_path / "d.png").data, d, atol=1e-12)

    def test_custom_scale(self, tmp_path):
        d = np.full((4, 4), 1.23456)
        save_depth_png(DepthImage(d), tmp_path / "d.png", 0.0001)
        np.testing.assert_allclose(load_depth_png(tmp_path / "d.png", 0.0001).data, 1.2346, atol=1e-9)

    def test_overflow(self, tmp_path):
        with pytest.raises(ValueError):
            save_depth_png(DepthImage(np.full((2, 2), 70.0)), tmp_path / "d.png")


class TestJson:
    def test_intrinsics(self, tmp_path):
        save_intrinsics(Intrinsics(500, 510, 320, 240), tmp_path / "k.json", depth_scale=0.0001)
        K, extra = load_intrinsics(tmp_path / "k.json")
        assert K == Intrinsics(500, 510, 320, 240)
        assert extra == {"depth_scale": 0.0001}

    def test_intrinsics_matrix_form(self, tmp_path):
        (tmp_path / "k.json").write_text(json.dumps({"K": [[500, 0, 320], [0, 510, 240], [0, 0, 1]]}))
        assert load_intrinsics(tmp_path / "k.json")[0] == Intrinsics(500, 510, 320, 240)

    def test_intrinsics_missing_key(self, tmp_path):
        (tmp_path / "k.json").write_text(json.dumps({"fx": 1}))
        with pytest.raises(ValueError):
            load_intrinsics(tmp_path / "k.json")

    def test_pose_round_trip(self, rng):
        P = Pose(random_rotation(rng), rng.normal(size=3))
        m = pose_to_json(P)
        assert len(m) == 3 and all(len(r) == 4 for r in m)
        assert pose_from_json(json.loads(json.dumps(m))) == P
        assert pose_from_json(np.asarray(m).ravel()) == P
        assert pose_from_json(P.matrix()) == P
        with pytest.raises(ValueError):
            pose_from_json([[1, 2], [3, 4]])

    def test_ground_truth(self, tmp_path, rng):
        gt = GroundTruthPose("box", Pose(random_rotation(rng), [0, 0, 1.0]), "0007")
        save_ground_truth(gt, tmp_path / "g.json")
        back = load_ground_truth(tmp_path / "g.json")
        assert back.object_id == "box" and back.frame_id == "0007" and back.pose == gt.pose


class TestDataset:
    def test_layout(self, tmp_path, rng):
        root = tmp_path / "obj"
        root.mkdir()
        save_ply(OrientedPointCloud(rng.normal(size=(5, 3))), root / "model.ply")
        save_intrinsics(Intrinsics.vga(), root / "intrinsics.json", depth_scale=0.001, object_id="obj")
        d = DepthImage(np.full((8, 8), 1.0))
        write_frame(root, "0000", d, Pose(), "obj")
        write_frame(root, "0001", d, None, "obj")
        ds = open_dataset(root)
        assert ds.frame_ids == ["0000", "0001"] and ds.object_id == "obj"
        f = ds.frame("0000")
        assert f.gt.pose == Pose() and f.depth.data[0, 0] == 1.0
        assert ds.frame("0001", require_gt=False).gt is None
        with pytest.raises(MissingGroundTruthError):
            ds.frame("0001")
        assert len(ds.load_model()) == 5

    def test_not_a_dataset(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            open_dataset(tmp_path)
