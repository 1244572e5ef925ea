"""Evaluation: the ADD pose metric, dataset and synthetic suites, ablation of contributions."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .geometry import Pose
from .io import Dataset, MissingGroundTruthError, open_dataset
from .model_table import ModelTable, build_model_table, point_set_diameter
from .pipeline import ALL_ON, BASELINE, Contributions, Detector, PipelineParams, configure
from .preprocess import DepthImage, Intrinsics, OrientedPointCloud, estimate_normals, subsample
from .synth import SynthConfig, make_model, synth_scene


def add_metric(gt: Pose, est: Pose, model: OrientedPointCloud | np.ndarray, d_obj: float, k_m: float = 0.1) -> tuple[float, bool]:
    """Mean distance between model points under both poses; success iff <= k_m * d_obj."""
    pts = model.points if isinstance(model, OrientedPointCloud) else np.asarray(model, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("the ADD metric needs model points")
    err = float(np.mean(np.linalg.norm(gt.apply(pts) - est.apply(pts), axis=1)))
    return err, err <= k_m * d_obj


@dataclass
class FrameResult:
    frame_id: str
    object_id: str
    success: bool
    error: float  # ADD error in m; inf without a detection
    runtime: float  # s
    detected: bool
    n_detections: int = 0
    fitness: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["error"] = None if math.isinf(self.error) else self.error
        return d


@dataclass
class EvalReport:
    frames: list[FrameResult]
    config: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def successes(self) -> list[bool]:
        return [f.success for f in self.frames]

    @property
    def matching_score(self) -> float:
        return sum(self.successes) / self.n_frames if self.frames else 0.0

    @property
    def mean_runtime(self) -> float:
        return float(np.mean([f.runtime for f in self.frames])) if self.frames else 0.0

    def to_dict(self) -> dict:
        return {
            "matching_score": self.matching_score,
            "n_frames": self.n_frames,
            "n_success": int(sum(self.successes)),
            "mean_runtime_s": self.mean_runtime,
            "config": self.config,
            "frames": [f.to_dict() for f in self.frames],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(FrameResult.__dataclass_fields__))
            w.writeheader()
            for f in self.frames:
                w.writerow(f.to_dict())


@dataclass
class EvalFrame:
    frame_id: str
    object_id: str
    depth: DepthImage
    K: Intrinsics
    gt: Pose | None


def run_frames(
    frames: Iterable[EvalFrame],
    detector_for: Callable[[str], Detector],
    add_points_for: Callable[[str], np.ndarray],
    k_m: float = 0.1,
    config: dict | None = None,
) -> EvalReport:
    """Detect in every frame and score the top detection with the ADD metric."""
    results = []
    for fr in frames:
        if fr.gt is None:
            raise MissingGroundTruthError(f"frame {fr.frame_id} has no ground truth")
        det = detector_for(fr.object_id)
        t = time.perf_counter()
        res = det.detect(fr.depth, fr.K)
        rt = time.perf_counter() - t
        best = res.best
        if best is None:
            results.append(FrameResult(fr.frame_id, fr.object_id, False, math.inf, rt, False))
            continue
        err, ok = add_metric(fr.gt, best.pose, add_points_for(fr.object_id), det.d_obj, k_m)
        results.append(FrameResult(fr.frame_id, fr.object_id, ok, err, rt, True, len(res.detections), float(best.fitness)))
    if not results:
        raise ValueError("no frames to evaluate")
    return EvalReport(results, dict(config or {}))


# --- synthetic suites -------------------------------------------------------------


@dataclass
class SuiteConfig:
    """``n_frames`` scenes; scene i uses model ``models[i % len(models)]`` and seed ``scene.seed + i``."""

    n_frames: int = 100
    models: tuple[str, ...] = ("box", "cylinder", "bracket")
    scene: SynthConfig = field(default_factory=SynthConfig)
    params: dict = field(default_factory=dict)  # pipeline overrides (key=value)

    def scene_config(self, i: int) -> SynthConfig:
        return replace(self.scene, seed=self.scene.seed + i, model=self.models[i % len(self.models)])

    def to_dict(self) -> dict:
        return {"n_frames": self.n_frames, "models": list(self.models), "scene": self.scene.to_dict(), "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "SuiteConfig":
        scene_d = dict(d.get("scene", {}))
        # scene fields may also sit at the top level
        scene_d.update({k: v for k, v in d.items() if k in SynthConfig.__dataclass_fields__})
        models = d.get("models", d.get("model", cls.models))
        if isinstance(models, str):
            models = (models,)
        return cls(
            n_frames=int(d.get("n_frames", 100)),
            models=tuple(models),
            scene=SynthConfig.from_dict(scene_d),
            params=dict(d.get("params", {})),
        )

    @classmethod
    def load(cls, path) -> "SuiteConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SynthObject:
    name: str
    dense: OrientedPointCloud  # surface samples used for ADD and rendering scenes
    d_obj: float
    table: ModelTable
    refine: OrientedPointCloud


def synth_object(name: str, params: PipelineParams = PipelineParams(), spacing: float = 0.0015) -> SynthObject:
    """Model table (at the pipeline's sampling distance) and refinement cloud of a synthetic model."""
    dense = make_model(name, spacing)
    d = point_set_diameter(dense.points)
    table = build_model_table(subsample(dense, params.sampling * d), d)
    refine = subsample(dense, 0.5 * params.sampling * d)
    return SynthObject(name, dense, d, table, refine)


def synth_frames(suite: SuiteConfig, objects: dict[str, SynthObject] | None = None) -> Iterator[EvalFrame]:
    for i in range(suite.n_frames):
        cfg = suite.scene_config(i)
        model = objects[cfg.model].dense if objects and cfg.model in objects else None
        sc = synth_scene(cfg, model)
        yield EvalFrame(f"{i:04d}", cfg.model, sc.depth, sc.K, sc.gt)


def evaluate_synth(
    suite: SuiteConfig,
    params: PipelineParams = PipelineParams(),
    objects: dict[str, SynthObject] | None = None,
    k_m: float = 0.1,
) -> EvalReport:
    """Run the pipeline over a synthetic suite (tables built on demand and reused)."""
    objects = dict(objects or {})
    for name in suite.models:
        if name not in objects:
            objects[name] = synth_object(name, params, suite.scene.render_spacing)
    detectors = {n: Detector(o.table, params, o.refine, o.dense) for n, o in objects.items()}
    config = {"suite": suite.to_dict(), "params": params.to_dict()}
    return run_frames(
        synth_frames(suite, objects),
        detectors.__getitem__,
        lambda n: objects[n].dense.points,
        k_m,
        config,
    )


# --- datasets -------------------------------------------------------------------------


def prepare_model(cloud: OrientedPointCloud, sampling: float = 0.05, d_obj: float | None = None) -> tuple[OrientedPointCloud, float]:
    """Give a loaded model normals (estimated, oriented outward) if it lacks them; return it with d_obj."""
    if d_obj is None:
        d_obj = point_set_diameter(cloud.points)
    if not cloud.has_normals:
        c = cloud.points.mean(axis=0)
        # orient away from the centroid: a viewpoint at the centroid, flipped
        est = estimate_normals(cloud, k=10, viewpoint=c)
        est.normals = -est.normals
        cloud = est
    return cloud, d_obj


def evaluate_dataset(
    root,
    params: PipelineParams = PipelineParams(),
    table: ModelTable | None = None,
    k_m: float = 0.1,
    max_frames: int | None = None,
) -> EvalReport:
    """Run the pipeline on a dataset directory (see :mod:`ppf.io` for the layout)."""
    ds: Dataset = open_dataset(root)
    if len(ds) == 0:
        raise ValueError(f"{root} holds no frames")
    model, d_obj = prepare_model(ds.load_model(), params.sampling)
    if table is None:
        table = build_model_table(subsample(model, params.sampling * d_obj), d_obj)
    refine = subsample(model, 0.5 * params.sampling * table.d_obj)
    det = Detector(table, params, refine, model)
    ids = ds.frame_ids[:max_frames] if max_frames else ds.frame_ids

    def frames():
        for fid in ids:
            f = ds.frame(fid)
            yield EvalFrame(fid, ds.object_id, f.depth, ds.K, f.gt.pose)

    config = {"dataset": str(root), "object_id": ds.object_id, "params": params.to_dict()}
    return run_frames(frames(), lambda _: det, lambda _: model.points, k_m, config)


# --- ablation -------------------------------------------------------------------------

ABLATION_CONFIGS = {
    "baseline": BASELINE,
    "noise": Contributions(True, False, False),
    "sampling": Contributions(False, True, False),
    "preprocessing": Contributions(False, False, True),
    "all": ALL_ON,
}


@dataclass
class AblationReport:
    scores: dict[str, float]
    runtimes: dict[str, float]
    contributions: dict[str, dict]
    gain_ratio: dict[str, float | None]  # S_c / (S_all - S_baseline)
    gain_difference: dict[str, float | None]  # (S_c - S_baseline) / (S_all - S_baseline)
    reports: dict[str, EvalReport] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "scores": self.scores,
            "mean_runtime_s": self.runtimes,
            "configurations": self.contributions,
            "gain_ratio": self.gain_ratio,
            "gain_difference": self.gain_difference,
        }


def gains(scores: dict[str, float]) -> tuple[dict, dict]:
    """Both readings of the per-contribution gain; None when all-on equals baseline."""
    span = scores["all"] - scores["baseline"]
    ratio, diff = {}, {}
    for name in ("noise", "sampling", "preprocessing"):
        if name not in scores or span == 0:
            ratio[name] = diff[name] = None
            continue
        ratio[name] = scores[name] / span
        diff[name] = (scores[name] - scores["baseline"]) / span
    return ratio, diff


def ablate(
    suite: SuiteConfig,
    params: PipelineParams = PipelineParams(),
    configs: dict[str, Contributions] | None = None,
    k_m: float = 0.1,
) -> AblationReport:
    """Matching score of the suite with each contribution set (baseline, singles, all)."""
    configs = configs or ABLATION_CONFIGS
    objects = {n: synth_object(n, params, suite.scene.render_spacing) for n in suite.models}
    scores, runtimes, reports = {}, {}, {}
    for name, c in configs.items():
        rep = evaluate_synth(suite, configure(params, c), objects, k_m)
        scores[name] = rep.matching_score
        runtimes[name] = rep.mean_runtime
        reports[name] = rep
    ratio, diff = gains(scores) if {"all", "baseline"} <= scores.keys() else ({}, {})
    return AblationReport(scores, runtimes, {n: c.to_dict() for n, c in configs.items()}, ratio, diff, reports)
