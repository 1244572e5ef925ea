"""Render-based verification of pose candidates.

Models are rendered as z-buffered surfels: every (front-facing) model point is
a small disk of radius ``splat_scale * spacing`` lying in its tangent plane.
Each pixel inside the projected disk gets the exact ray/disk intersection depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage

from .geometry import Pose
from .preprocess import DepthImage, Intrinsics, OrientedPointCloud


class SizeMismatchError(ValueError):
    pass


class EmptySilhouetteError(ValueError):
    pass


RANK_KEYS = ("support", "support_edge", "support_edge_votes")


@dataclass(frozen=True)
class VerifyParams:
    depth_tol: float = 0.02
    violation_max: float = 0.10
    occlusion_max: float = 0.10
    edge_coverage_min: float = 0.10
    edge_depth_step: float = 0.02
    edge_normal_step: float = math.radians(30.0)
    edge_dilate_px: int = 2
    splat_scale: float = 0.6
    # True: scene in front of the rendering counts as occluded (physically consistent);
    # False: the opposite reading, scene behind counts as occluded
    occluder_in_front: bool = True
    # ranking key: "support_edge" ranks by support x edge coverage, which
    # penalizes poses whose rendering hides inside a larger observed surface;
    # "support" ranks by the support fraction alone; "support_edge_votes"
    # also multiplies by the candidate's vote weight relative to the best one
    rank_by: str = "support_edge_votes"
    # score only what the scene leaves visible: support is taken over the
    # rendered pixels not occluded by the scene, and occluded silhouette
    # pixels are left out of the edge coverage
    occlusion_aware: bool = True

    def __post_init__(self):
        for name in ("violation_max", "occlusion_max", "edge_coverage_min"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a fraction in [0, 1]")
        if self.rank_by not in RANK_KEYS:
            raise ValueError(f"rank_by must be one of {RANK_KEYS}")


@dataclass
class RenderedView:
    depth: DepthImage
    mask: np.ndarray
    silhouette: np.ndarray

    @property
    def n_pixels(self) -> int:
        return int(self.mask.sum())

    @property
    def empty(self) -> bool:
        return self.n_pixels == 0


@dataclass
class VerifyScores:
    support: float = 0.0
    occluded: float = 0.0
    violating: float = 0.0
    missing: float = 0.0
    edge_coverage: float = 0.0
    n_rendered: int = 0
    empty: bool = False

    occlusion_aware: bool = False

    @property
    def fitness(self) -> float:
        if self.occlusion_aware:
            visible = 1.0 - self.occluded
            return self.support / visible if visible > 0 else 0.0
        return self.support

    def as_dict(self) -> dict:
        return {
            "support": self.support,
            "occluded": self.occluded,
            "violating": self.violating,
            "missing": self.missing,
            "edge_coverage": self.edge_coverage,
            "fitness": self.fitness,
            "n_rendered": self.n_rendered,
            "empty": self.empty,
        }


@dataclass
class Detection:
    pose: Pose
    scores: VerifyScores
    weight: float = 0.0
    ball: str = ""
    info: dict = field(default_factory=dict)

    @property
    def fitness(self) -> float:
        return self.scores.fitness


@numba.njit(cache=True)
def _splat(pts, nrm, radius, fx, fy, cx, cy, width, height, cull, zbuf):
    for i in range(pts.shape[0]):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        if pz <= 1e-6:
            continue
        nx, ny, nz = nrm[i, 0], nrm[i, 1], nrm[i, 2]
        ndp = nx * px + ny * py + nz * pz
        if cull and ndp >= 0.0:
            continue
        u0 = fx * px / pz + cx
        v0 = fy * py / pz + cy
        ext = radius * max(fx, fy) / pz + 1.0
        ua = max(int(math.floor(u0 - ext)), 0)
        ub = min(int(math.ceil(u0 + ext)), width - 1)
        va = max(int(math.floor(v0 - ext)), 0)
        vb = min(int(math.ceil(v0 + ext)), height - 1)
        r2 = radius * radius
        for v in range(va, vb + 1):
            ry = (v - cy) / fy
            for u in range(ua, ub + 1):
                rx = (u - cx) / fx
                den = nx * rx + ny * ry + nz
                if abs(den) < 1e-9:
                    continue
                z = ndp / den
                if z <= 1e-6:
                    continue
                dx = rx * z - px
                dy = ry * z - py
                dz = z - pz
                if dx * dx + dy * dy + dz * dz > r2:
                    continue
                if z < zbuf[v, u]:
                    zbuf[v, u] = z


def splat_points(points, normals, radius: float, K: Intrinsics, size: tuple[int, int], cull: bool = True, zbuf=None) -> np.ndarray:
    """Z-buffer camera-frame surfels into a (height, width) array (inf where empty)."""
    w, h = size
    if zbuf is None:
        zbuf = np.full((h, w), np.inf)
    _splat(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(normals, dtype=np.float64),
        float(radius), K.fx, K.fy, K.cx, K.cy, w, h, cull, zbuf,
    )
    return zbuf


def silhouette_of(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one unmasked 4-neighbor (outside the image counts as unmasked)."""
    pad = np.pad(mask, 1, constant_values=False)
    inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return mask & ~inner


def render_depth(
    model: OrientedPointCloud,
    pose: Pose,
    K: Intrinsics,
    size: tuple[int, int],
    spacing: float,
    splat_scale: float = 0.6,
    cull: bool = True,
) -> RenderedView:
    """Render the posed model; ``spacing`` is the model's sampling distance (m)."""
    if len(model) == 0:
        raise ValueError("cannot render an empty model")
    pts = pose.apply(model.points)
    nrm = pose.rotate(model.normals)
    zbuf = splat_points(pts, nrm, splat_scale * spacing, K, size, cull)
    mask = np.isfinite(zbuf)
    depth = np.where(mask, zbuf, 0.0)
    return RenderedView(DepthImage(depth), mask, silhouette_of(mask))


def score_pose(view: RenderedView, scene_depth: DepthImage, p: VerifyParams = VerifyParams()) -> VerifyScores:
    """Classify every rendered pixel against the scene depth."""
    if view.depth.data.shape != scene_depth.data.shape:
        raise SizeMismatchError(f"render {view.depth.data.shape} vs scene {scene_depth.data.shape}")
    n = view.n_pixels
    if n == 0:
        return VerifyScores(missing=1.0, empty=True)
    rd = view.depth.data[view.mask]
    sd = scene_depth.data[view.mask]
    valid = sd > 0
    delta = sd - rd
    support = valid & (np.abs(delta) <= p.depth_tol)
    front = valid & (delta < -p.depth_tol)
    behind = valid & (delta > p.depth_tol)
    occ, vio = (front, behind) if p.occluder_in_front else (behind, front)
    return VerifyScores(
        support=support.sum() / n,
        occluded=occ.sum() / n,
        violating=vio.sum() / n,
        missing=(~valid).sum() / n,
        n_rendered=n,
        occlusion_aware=p.occlusion_aware,
    )


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return (r[:, None] ** 2 + r[None, :] ** 2) <= radius * radius


def scene_edge_map(scene_depth: DepthImage, scene_normals: np.ndarray | None, p: VerifyParams = VerifyParams()) -> np.ndarray:
    """Pixels with a large depth range or normal spread over their 4-neighborhood, dilated."""
    d = scene_depth.data
    valid = d > 0
    H, W = d.shape
    # invalid pixels are neutral: -inf for the maximum, +inf for the minimum
    hi = np.pad(np.where(valid, d, -np.inf), 1, constant_values=-np.inf)
    lo = np.pad(np.where(valid, d, np.inf), 1, constant_values=np.inf)
    vpad = np.pad(valid, 1, constant_values=True)  # image border is not an edge
    shifts = ((slice(1, -1), slice(1, -1)), (slice(None, -2), slice(1, -1)), (slice(2, None), slice(1, -1)),
              (slice(1, -1), slice(None, -2)), (slice(1, -1), slice(2, None)))
    rng = np.max([hi[s] for s in shifts], axis=0) - np.min([lo[s] for s in shifts], axis=0)
    vstack = np.stack([vpad[s] for s in shifts[1:]])
    edge = valid & (rng > p.edge_depth_step)
    # a valid pixel next to an invalid one is a depth discontinuity
    edge |= valid & ~np.all(vstack, axis=0)
    if scene_normals is not None:
        nm = np.asarray(scene_normals, dtype=float).reshape(H, W, 3)
        has = np.linalg.norm(nm, axis=2) > 0.5
        npad = np.pad(nm, ((1, 1), (1, 1), (0, 0)))
        hpad = np.pad(has, 1, constant_values=False)
        cos_thr = math.cos(p.edge_normal_step)
        for sl in ((slice(None, -2), slice(1, -1)), (slice(2, None), slice(1, -1)),
                   (slice(1, -1), slice(None, -2)), (slice(1, -1), slice(2, None))):
            c = np.einsum("hwk,hwk->hw", nm, npad[sl])
            edge |= has & hpad[sl] & (c < cos_thr)
    if p.edge_dilate_px > 0:
        edge = ndimage.binary_dilation(edge, structure=_disk(p.edge_dilate_px))
    return edge


def edge_coverage(
    scene_depth: DepthImage,
    scene_normals: np.ndarray | None,
    view: RenderedView,
    p: VerifyParams = VerifyParams(),
    edge_map: np.ndarray | None = None,
) -> float:
    """Fraction of silhouette pixels that land on the scene's edge map.

    With ``p.occlusion_aware`` silhouette pixels behind the scene surface
    (by more than ``p.depth_tol``) are not counted.
    """
    sil = view.silhouette
    if p.occlusion_aware:
        sd = scene_depth.data
        front = (sd > 0) & (sd - view.depth.data < -p.depth_tol)
        hidden = front if p.occluder_in_front else (sd > 0) & (sd - view.depth.data > p.depth_tol)
        sil = sil & ~hidden
    n = int(sil.sum())
    if n == 0:
        raise EmptySilhouetteError("rendered view has no silhouette")
    if edge_map is None:
        edge_map = scene_edge_map(scene_depth, scene_normals, p)
    return float((edge_map & sil).sum() / n)


def passes(s: VerifyScores, p: VerifyParams) -> bool:
    return (
        not s.empty
        and s.violating <= p.violation_max
        and s.occluded <= p.occlusion_max
        and s.edge_coverage >= p.edge_coverage_min
    )


def ranking_score(s: VerifyScores, p: VerifyParams = VerifyParams(), vote_share: float = 1.0) -> float:
    """Ranking key of a candidate; ``vote_share`` is its weight over the best candidate's."""
    if p.rank_by == "support":
        return float(s.fitness)
    if p.rank_by == "support_edge_votes":
        return float(s.fitness * s.edge_coverage * vote_share)
    return float(s.fitness * s.edge_coverage)


def rank_and_filter(
    candidates,
    p: VerifyParams = VerifyParams(),
    multi: bool = False,
    trans_thresh: float = 0.0,
    rot_thresh: float = math.radians(12.0),
) -> list[Detection]:
    """Drop failing candidates, rank the rest, and keep the best (or all distinct ones).

    Ranking follows ``p.rank_by`` (see :func:`ranking_score`); the sort is
    stable, so equal scores keep their input order.

    ``candidates`` holds :class:`Detection` objects or ``(pose, scores)`` pairs.
    In multi-instance mode a candidate within both thresholds of a better
    kept one is suppressed (the default translation threshold of 0 only
    suppresses exact positional repeats).
    """
    dets = [c if isinstance(c, Detection) else Detection(c[0], c[1]) for c in candidates]
    kept = [d for d in dets if passes(d.scores, p)]
    w_max = max((d.weight for d in kept), default=0.0)
    share = (lambda d: d.weight / w_max) if w_max > 0 else (lambda d: 1.0)
    kept.sort(key=lambda d: -ranking_score(d.scores, p, share(d)))
    if not multi:
        return kept[:1]
    out: list[Detection] = []
    for d in kept:
        dup = False
        for o in out:
            dt, dr = d.pose.distance_to(o.pose)
            if dt <= trans_thresh and dr <= rot_thresh:
                dup = True
                break
        if not dup:
            out.append(d)
    return out
