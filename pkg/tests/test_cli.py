"""Tests for the command line interface and its exit codes."""

import json
import subprocess
import sys

import numpy as np
import pytest

from ppf.cli import EXIT_ERROR, EXIT_NO_DETECTION, EXIT_OK, main, read_config
from ppf.io import open_dataset, save_depth_png
from ppf.preprocess import DepthImage


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "suite.json"
    cfg.write_text(json.dumps({"n_frames": 2, "models": ["box"], "scene": {"seed": 21}}))
    assert main(["synth", str(cfg), "-o", str(root / "data")]) == EXIT_OK
    model = root / "box.ppf1"
    assert main(["build-model", str(root / "data/box/model.ply"), "--diameter-auto", "-o", str(model)]) == EXIT_OK
    return root, cfg, model


def test_synth_layout(workspace):
    root, _, _ = workspace
    obj = root / "data" / "box"
    assert (obj / "model.ply").exists() and (obj / "intrinsics.json").exists()
    assert sorted(p.name for p in (obj / "frames").iterdir()) == [
        "0000.depth.png", "0000.gt.json", "0001.depth.png", "0001.gt.json"
    ]


def test_detect_success(workspace, capsys):
    root, _, model = workspace
    obj = root / "data" / "box"
    out = root / "det.json"
    code = main(["detect", "--model", str(model), "--depth", str(obj / "frames/0000.depth.png"),
                 "--intrinsics", str(obj / "intrinsics.json"), "-o", str(out)])
    assert code == EXIT_OK
    dets = json.loads(out.read_text())["detections"]
    assert len(dets) == 1 and np.asarray(dets[0]["pose"]).shape == (3, 4)


def test_detect_with_full_model(workspace):
    root, _, model = workspace
    obj = root / "data" / "box"
    out = root / "det_full.json"
    code = main(["detect", "--model", str(model), "--model-ply", str(obj / "model.ply"),
                 "--depth", str(obj / "frames/0000.depth.png"), "--intrinsics", str(obj / "intrinsics.json"),
                 "-o", str(out)])
    assert code == EXIT_OK
    pose = np.asarray(json.loads(out.read_text())["detections"][0]["pose"])
    gt = open_dataset(obj).frame("0000").gt.pose
    assert np.linalg.norm(pose[:, 3] - gt.t) < 0.01


def test_detect_nothing_found(workspace, tmp_path):
    _, _, model = workspace
    save_depth_png(DepthImage.empty(640, 480), tmp_path / "empty.png")
    code = main(["detect", "--model", str(model), "--depth", str(tmp_path / "empty.png"),
                 "--intrinsics", str(workspace[0] / "data/box/intrinsics.json")])
    assert code == EXIT_NO_DETECTION


def test_detect_missing_file(workspace, tmp_path, capsys):
    _, _, model = workspace
    code = main(["detect", "--model", str(model), "--depth", str(tmp_path / "nope.png"),
                 "--intrinsics", str(tmp_path / "nope.json")])
    assert code == EXIT_ERROR
    assert "error" in capsys.readouterr().err


def test_bad_override_is_an_error(workspace):
    root, _, model = workspace
    obj = root / "data" / "box"
    code = main(["detect", "--model", str(model), "--depth", str(obj / "frames/0000.depth.png"),
                 "--intrinsics", str(obj / "intrinsics.json"), "--set", "no_such_key=1"])
    assert code == EXIT_ERROR


def test_eval_dataset_dir(workspace, capsys):
    root, _, _ = workspace
    out = root / "report.json"
    assert main(["eval", str(root / "data"), "-o", str(out), "--csv", str(root / "r.csv")]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["n_frames"] == 2
    assert "matching score" in capsys.readouterr().out


def test_eval_needs_exactly_one_source(workspace):
    root, cfg, _ = workspace
    assert main(["eval"]) == EXIT_ERROR
    assert main(["eval", str(root), "--synth", str(cfg)]) == EXIT_ERROR


def test_eval_synth_with_override(workspace, capsys):
    _, cfg, _ = workspace
    assert main(["eval", "--synth", str(cfg), "--frames", "1", "--set", "verify.occlusion_max=0.3"]) == EXIT_OK


def test_read_config_formats(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"icp.iters": 5}))
    (tmp_path / "b.cfg").write_text("# comment\nicp.iters = 5\nsampling=0.04\n")
    assert read_config(tmp_path / "a.json") == {"icp.iters": 5}
    assert read_config(tmp_path / "b.cfg") == {"icp.iters": "5", "sampling": "0.04"}
    (tmp_path / "c.cfg").write_text("oops\n")
    with pytest.raises(ValueError):
        read_config(tmp_path / "c.cfg")


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "ppf.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("build-model", "detect", "eval", "synth", "ablate"):
        assert cmd in r.stdout
