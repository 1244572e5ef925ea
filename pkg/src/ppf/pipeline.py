"""End-to-end detection: scene preparation, voting, clustering, ICP and verification."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .cluster_refine import ClusterParams, IcpParams, NoOverlapError, cluster_hypotheses, projective_icp
from .geometry import Pose
from .model_table import ModelTable
from .preprocess import (
    DepthImage,
    Intrinsics,
    OrientedPointCloud,
    auto_stride,
    depth_normal_map,
    depth_to_cloud,
    estimate_normals,
    subsample,
)
from .verify import (
    Detection,
    EmptySilhouetteError,
    VerifyParams,
    VerifyScores,
    edge_coverage,
    rank_and_filter,
    render_depth,
    scene_edge_map,
    score_pose,
)
from .voting import DetectionParams, detect_raw


@dataclass(frozen=True)
class PipelineParams:
    sampling: float = 0.05  # scene subsampling distance as a fraction of d_obj
    normal_k: int = 30
    normal_aware: bool = True  # keep close points whose normals differ when subsampling
    normal_keep_angle: float = math.radians(30.0)
    pixel_oversample: float = 3.0  # back-projected pixels per subsampling distance
    icp_gate: float = 2.5  # ICP association gate in subsampling distances
    spread: bool = True  # neighbor spreading of table lookups
    refine: bool = True
    multi: bool = False
    detection: DetectionParams = DetectionParams()
    cluster: ClusterParams = ClusterParams()
    icp: IcpParams = IcpParams()
    verify: VerifyParams = VerifyParams()

    def __post_init__(self):
        if not 0 < self.sampling < 1:
            raise ValueError("sampling must be a fraction of the object diameter in (0, 1)")
        if self.normal_k < 3:
            raise ValueError("normal_k must be at least 3")

    def to_dict(self) -> dict:
        return _to_jsonable(dataclasses.asdict(self))


def _to_jsonable(v):
    if isinstance(v, dict):
        return {k: _to_jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_to_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


_SECTIONS = ("detection", "cluster", "icp", "verify")


def _coerce(old, value):
    if isinstance(old, bool):
        if isinstance(value, str):
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        return bool(value)
    if isinstance(old, int):
        return int(value)
    if isinstance(old, float):
        return float(value)
    return value


def apply_overrides(params: PipelineParams, overrides: dict) -> PipelineParams:
    """Return ``params`` with ``key=value`` overrides applied.

    Keys are either ``section.name`` (sections: detection, cluster, icp,
    verify) or a bare field name, looked up first on the pipeline itself and
    then in each section. String values are converted to the field's type.
    """
    top: dict = {}
    sub: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, value in overrides.items():
        if "." in key:
            sec, name = key.split(".", 1)
            if sec not in sub:
                raise KeyError(f"unknown parameter section {sec!r}")
            target = getattr(params, sec)
            if name not in {f.name for f in dataclasses.fields(target)}:
                raise KeyError(f"unknown parameter {key!r}")
            sub[sec][name] = _coerce(getattr(target, name), value)
            continue
        own = {f.name for f in dataclasses.fields(params)} - set(_SECTIONS)
        if key in own:
            top[key] = _coerce(getattr(params, key), value)
            continue
        hits = [s for s in _SECTIONS if key in {f.name for f in dataclasses.fields(getattr(params, s))}]
        if not hits:
            raise KeyError(f"unknown parameter {key!r}")
        for s in hits:
            sub[s][key] = _coerce(getattr(getattr(params, s), key), value)
    for s, kw in sub.items():
        if kw:
            top[s] = replace(getattr(params, s), **kw)
    return replace(params, **top)


@dataclass(frozen=True)
class Contributions:
    """Switches for the improvements over the plain baseline detector.

    ``noise``: neighbor spreading of the table, rotation spreading and vote
    flags. ``sampling``: voxel-ball pair sampling with two balls (off: every
    fifth scene point as reference, paired with all scene points).
    ``preprocessing``: normal-aware subsampling.
    """

    noise: bool = True
    sampling: bool = True
    preprocessing: bool = True

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


BASELINE = Contributions(False, False, False)
ALL_ON = Contributions(True, True, True)


def configure(params: PipelineParams, c: Contributions) -> PipelineParams:
    """Pipeline parameters with exactly the contributions in ``c`` enabled."""
    det = replace(
        params.detection,
        spreading_rotation=c.noise,
        flags_enabled=c.noise,
        all_pairs=not c.sampling,
        two_balls=c.sampling,
        reference_stride=1 if c.sampling else 5,
    )
    return replace(params, detection=det, normal_aware=c.preprocessing, spread=c.noise)


def table_for(table: ModelTable, spread: bool) -> ModelTable:
    """``table`` with neighbor spreading switched on or off (shares the arrays)."""
    if table.spread == spread:
        return table
    return replace(table, spread=spread)


@dataclass
class SceneFrame:
    depth: DepthImage
    K: Intrinsics
    cloud: OrientedPointCloud  # subsampled, with normals
    normal_map: np.ndarray
    min_dist: float
    stride: int
    n_dense: int

    @property
    def size(self) -> tuple[int, int]:
        return self.depth.size


def prepare_scene(depth: DepthImage, K: Intrinsics, d_obj: float, params: PipelineParams = PipelineParams()) -> SceneFrame:
    """Back-project, estimate normals and subsample a depth frame for voting."""
    md = params.sampling * d_obj
    stride = auto_stride(depth, K, md / params.pixel_oversample)
    dense = depth_to_cloud(depth, K, stride)
    if len(dense) >= 3:
        dense = estimate_normals(dense, k=params.normal_k, max_radius=2.0 * md)
    else:
        dense = OrientedPointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    keep_angle = params.normal_keep_angle if params.normal_aware else math.pi
    cloud = subsample(dense, md, keep_angle) if len(dense) else dense
    return SceneFrame(depth, K, cloud, depth_normal_map(depth, K), md, stride, len(dense))


def model_spacing(model: OrientedPointCloud) -> float:
    """Median nearest-neighbor distance of the model points."""
    if len(model) < 2:
        return 0.0
    d, _ = cKDTree(model.points).query(model.points, k=2)
    return float(np.median(d[:, 1]))


@dataclass
class DetectionResult:
    detections: list[Detection]
    candidates: list[Detection]
    timings: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def best(self) -> Detection | None:
        return self.detections[0] if self.detections else None


class Detector:
    """Detect one model in depth frames.

    ``refine_model`` (default: the table's model cloud) is used for ICP and
    ``render_model`` (default: the refinement cloud) for rendering during
    verification. A denser render model gives a gap-free rendering with a
    tighter silhouette. Both must be expressed in the table's model frame.
    """

    def __init__(
        self,
        table: ModelTable,
        params: PipelineParams = PipelineParams(),
        refine_model: OrientedPointCloud | None = None,
        render_model: OrientedPointCloud | None = None,
    ):
        self.table = table_for(table, params.spread)
        self.params = params
        self.refine_model = refine_model if refine_model is not None else table.model_cloud
        self.render_model = render_model if render_model is not None else self.refine_model
        self.spacing = model_spacing(self.render_model)

    @property
    def d_obj(self) -> float:
        return self.table.d_obj

    def detect(self, depth: DepthImage, K: Intrinsics, multi: bool | None = None) -> DetectionResult:
        p = self.params
        multi = p.multi if multi is None else multi
        times: dict[str, float] = {}
        t0 = time.perf_counter()
        frame = prepare_scene(depth, K, self.d_obj, p)
        times["preprocess"] = time.perf_counter() - t0

        t = time.perf_counter()
        raw = detect_raw(frame.cloud, self.table, p.detection)
        times["voting"] = time.perf_counter() - t

        t = time.perf_counter()
        seeds = []
        for hyps in raw:
            for c in cluster_hypotheses(hyps, self.d_obj, p.cluster)[: p.cluster.max_clusters_per_ball]:
                seeds.append(c)
        times["clustering"] = time.perf_counter() - t

        t = time.perf_counter()
        icp_p = replace(p.icp, max_dist=p.icp_gate * frame.min_dist)
        refined = []
        for c in seeds:
            info = {"cluster_weight": c.weight, "ball": c.ball}
            pose = c.center_pose
            if p.refine:
                try:
                    r = projective_icp(pose, self.refine_model, depth, K, scene_normals=frame.normal_map, params=icp_p)
                    pose = r.pose
                    info.update(icp_residual=r.residual, icp_inliers=r.inlier_fraction, icp_iterations=r.iterations)
                except NoOverlapError:
                    info["icp_failed"] = True
            refined.append((pose, c, info))
        times["refine"] = time.perf_counter() - t

        t = time.perf_counter()
        edges = scene_edge_map(depth, frame.normal_map, p.verify)
        cands = [
            Detection(pose, self.score(pose, depth, K, frame.normal_map, edges), float(c.weight), c.ball, info)
            for pose, c, info in refined
        ]
        dets = rank_and_filter(cands, p.verify, multi, p.cluster.trans_thresh(self.d_obj), p.cluster.rot_thresh)
        times["verify"] = time.perf_counter() - t
        times["total"] = time.perf_counter() - t0
        stats = dict(raw.stats)
        stats.update(
            n_dense=frame.n_dense,
            n_subsampled=len(frame.cloud),
            stride=frame.stride,
            n_small=len(raw.small),
            n_large=len(raw.large),
            n_candidates=len(cands),
        )
        return DetectionResult(dets, cands, times, stats)

    def score(
        self,
        pose: Pose,
        depth: DepthImage,
        K: Intrinsics,
        normal_map: np.ndarray | None = None,
        edges: np.ndarray | None = None,
    ) -> VerifyScores:
        """Verification scores of ``pose`` in a depth frame, edge coverage included."""
        p = self.params.verify
        if normal_map is None:
            normal_map = depth_normal_map(depth, K)
        if edges is None:
            edges = scene_edge_map(depth, normal_map, p)
        view = render_depth(self.render_model, pose, K, depth.size, self.spacing, p.splat_scale)
        s = score_pose(view, depth, p)
        if not s.empty:
            try:
                s.edge_coverage = edge_coverage(depth, normal_map, view, p, edges)
            except EmptySilhouetteError:
                s.edge_coverage = 0.0
        return s

    def detect_pose(self, depth: DepthImage, K: Intrinsics) -> Pose | None:
        best = self.detect(depth, K).best
        return None if best is None else best.pose
