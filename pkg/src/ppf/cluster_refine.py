"""Pose clustering of vote peaks and projective ICP refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .geometry import Pose, rotation_vector_matrix
from .preprocess import DepthImage, Intrinsics, OrientedPointCloud, backproject_image
from .voting import BALL_NAMES, HypothesisSet


class NoOverlapError(RuntimeError):
    """Too few model points associate with the scene to run ICP."""


@dataclass(frozen=True)
class ClusterParams:
    trans_frac: float = 0.10  # translation threshold as a fraction of d_obj
    rot_thresh: float = math.radians(12.0)
    max_clusters_per_ball: int = 4

    def __post_init__(self):
        if self.trans_frac <= 0 or self.rot_thresh <= 0 or self.max_clusters_per_ball < 1:
            raise ValueError("cluster thresholds must be positive")

    def trans_thresh(self, d_obj: float) -> float:
        return self.trans_frac * d_obj


@dataclass
class Cluster:
    center_pose: Pose
    weight: int
    members: list[int]
    used_model_points: set[int]
    ball: str = "large"
    founder: int = -1


@numba.njit(cache=True)
def _similar(h, f, R, t, t2, cos_thr):
    dx = t[h, 0] - t[f, 0]
    dy = t[h, 1] - t[f, 1]
    dz = t[h, 2] - t[f, 2]
    if dx * dx + dy * dy + dz * dz > t2:
        return False
    tr = 0.0
    for i in range(3):
        for j in range(3):
            tr += R[h, i, j] * R[f, i, j]
    # geodesic angle <= thr  <=>  (trace - 1) / 2 >= cos(thr)
    return 0.5 * (tr - 1.0) >= cos_thr


@numba.njit(cache=True)
def _cluster_kernel(order, R, t, model_ref, votes, n_model, t2, cos_thr, cell_rank, nb_rank, n_cells):
    n = order.shape[0]
    # clusters are chained per translation cell (side = translation threshold),
    # so a hypothesis only visits the clusters of its 27 neighboring cells
    head = np.full(n_cells, -1, np.int64)
    cap = 64
    nxt = np.empty(cap, np.int64)
    center = np.empty(cap, np.int64)
    weight = np.zeros(cap, np.int64)
    used = np.zeros((cap, n_model), np.bool_)
    n_c = 0
    mem_c = np.empty(4 * n + 16, np.int64)
    mem_h = np.empty(4 * n + 16, np.int64)
    n_mem = 0
    for oi in range(n):
        h = order[oi]
        joined = False
        for k in range(27):
            r = nb_rank[h, k]
            if r < 0:
                continue
            c = head[r]
            while c >= 0:
                if _similar(h, center[c], R, t, t2, cos_thr):
                    joined = True
                    m = model_ref[h]
                    if not used[c, m]:
                        used[c, m] = True
                        weight[c] += votes[h]
                        if n_mem == mem_c.shape[0]:
                            mem_c = np.concatenate((mem_c, np.empty(mem_c.shape[0], np.int64)))
                            mem_h = np.concatenate((mem_h, np.empty(mem_h.shape[0], np.int64)))
                        mem_c[n_mem] = c
                        mem_h[n_mem] = h
                        n_mem += 1
                c = nxt[c]
        if not joined:
            if n_c == cap:
                cap *= 2
                center = np.concatenate((center, np.empty(cap - n_c, np.int64)))
                weight = np.concatenate((weight, np.zeros(cap - n_c, np.int64)))
                nxt = np.concatenate((nxt, np.empty(cap - n_c, np.int64)))
                grown = np.zeros((cap, n_model), np.bool_)
                grown[:n_c] = used
                used = grown
            center[n_c] = h
            weight[n_c] = votes[h]
            used[n_c, model_ref[h]] = True
            r = cell_rank[h]
            nxt[n_c] = head[r]
            head[r] = n_c
            if n_mem == mem_c.shape[0]:
                mem_c = np.concatenate((mem_c, np.empty(mem_c.shape[0], np.int64)))
                mem_h = np.concatenate((mem_h, np.empty(mem_h.shape[0], np.int64)))
            mem_c[n_mem] = n_c
            mem_h[n_mem] = h
            n_mem += 1
            n_c += 1
    return center[:n_c], weight[:n_c], mem_c[:n_mem], mem_h[:n_mem]


_CELL_OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], np.int64)


def _cell_ranks(t: np.ndarray, cell: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Dense rank of each translation's cell and of its 27 neighbor cells (-1: empty)."""
    cells = np.floor((t - t.min(axis=0)) / cell).astype(np.int64) + 1
    dims = cells.max(axis=0) + 2
    key = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    uniq, rank = np.unique(key, return_inverse=True)
    nb = cells[:, None, :] + _CELL_OFFSETS[None, :, :]
    nb_key = (nb[..., 0] * dims[1] + nb[..., 1]) * dims[2] + nb[..., 2]
    pos = np.minimum(np.searchsorted(uniq, nb_key), len(uniq) - 1)
    nb_rank = np.where(uniq[pos] == nb_key, pos, -1)
    return rank.astype(np.int64).reshape(-1), nb_rank.astype(np.int64), len(uniq)


def cluster_hypotheses(hyps: HypothesisSet, d_obj: float, params: ClusterParams = ClusterParams()) -> list[Cluster]:
    """Greedy clustering in descending vote order.

    A hypothesis joins every cluster whose founding pose is within the
    translation and rotation thresholds, but adds its votes to a cluster only
    if no member with the same model point was admitted before. A hypothesis
    that joins nothing founds a new cluster. Output is sorted by weight;
    ties keep founding order.
    """
    n = len(hyps)
    if n == 0:
        return []
    # stable sort keeps the input order among equal vote counts
    order = np.argsort(-hyps.votes, kind="stable")
    n_model = int(hyps.model_ref.max()) + 1
    thr = params.trans_thresh(d_obj)
    t = np.ascontiguousarray(hyps.t, dtype=np.float64)
    cell_rank, nb_rank, n_cells = _cell_ranks(t, thr)
    center, weight, mem_c, mem_h = _cluster_kernel(
        order, np.ascontiguousarray(hyps.R, dtype=np.float64), t,
        hyps.model_ref.astype(np.int64), hyps.votes.astype(np.int64), n_model, thr * thr,
        math.cos(params.rot_thresh), cell_rank, nb_rank, n_cells,
    )
    members: list[list[int]] = [[] for _ in range(len(center))]
    for c, h in zip(mem_c.tolist(), mem_h.tolist()):
        members[c].append(h)
    clusters = []
    for c in range(len(center)):
        f = int(center[c])
        clusters.append(
            Cluster(
                center_pose=Pose(hyps.R[f], hyps.t[f]),
                weight=int(weight[c]),
                members=members[c],
                used_model_points={int(hyps.model_ref[h]) for h in members[c]},
                ball=BALL_NAMES[int(hyps.ball[f])],
                founder=f,
            )
        )
    rank = np.argsort(-weight, kind="stable")
    return [clusters[i] for i in rank]


# --- projective ICP -----------------------------------------------------------


@dataclass(frozen=True)
class IcpParams:
    iters: int = 30
    trim: float = 0.1
    max_dist: float = 0.01  # association gate in m; the pipeline uses 2.5 x the subsampling distance
    max_normal_angle: float = math.radians(45.0)
    min_inliers: int = 6
    tol: float = 1e-5
    window_px: int = 4  # half-size of the pixel window searched around each projection
    point_weight: float = 0.2  # weight of the point-to-point term next to point-to-plane
    damping: float = 0.01
    max_view_angle: float = math.radians(90.0)

    def __post_init__(self):
        if not 0.0 <= self.trim < 1.0:
            raise ValueError("trim must lie in [0, 1)")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.max_dist <= 0 or self.window_px < 0 or self.point_weight < 0:
            raise ValueError("ICP gate, window and weight must be non-negative")


@dataclass
class IcpResult:
    pose: Pose
    residual: float
    inlier_fraction: float
    iterations: int = 0
    history: list[float] = field(default_factory=list)
    coarse_history: list[float] = field(default_factory=list)


@numba.njit(cache=True)
def _window_match(pts, nrm, xyz, nmap, fx, fy, cx, cy, wr, gate2, cos_n, out_pix):
    """Nearest valid scene pixel to each posed model point within a pixel window.

    Returns the number of model points in the image; ``out_pix[i]`` is the
    flat pixel index of the match or -1.
    """
    h, w = xyz.shape[0], xyz.shape[1]
    n_in = 0
    for i in range(pts.shape[0]):
        out_pix[i] = -1
        z = pts[i, 2]
        u0 = int(math.floor(fx * pts[i, 0] / z + cx + 0.5))
        v0 = int(math.floor(fy * pts[i, 1] / z + cy + 0.5))
        if u0 < 0 or u0 >= w or v0 < 0 or v0 >= h:
            continue
        n_in += 1
        best = gate2
        for v in range(max(v0 - wr, 0), min(v0 + wr + 1, h)):
            for u in range(max(u0 - wr, 0), min(u0 + wr + 1, w)):
                if xyz[v, u, 2] <= 0.0:
                    continue
                dx = xyz[v, u, 0] - pts[i, 0]
                dy = xyz[v, u, 1] - pts[i, 1]
                dz = xyz[v, u, 2] - pts[i, 2]
                d2 = dx * dx + dy * dy + dz * dz
                if d2 > best:
                    continue
                sn = nmap[v, u, 0] * nmap[v, u, 0] + nmap[v, u, 1] * nmap[v, u, 1] + nmap[v, u, 2] * nmap[v, u, 2]
                # unknown scene normals (zero vectors) cannot veto a pair
                if sn > 0.25:
                    c = nmap[v, u, 0] * nrm[i, 0] + nmap[v, u, 1] * nrm[i, 1] + nmap[v, u, 2] * nrm[i, 2]
                    if c < cos_n:
                        continue
                best = d2
                out_pix[i] = v * w + u
    return n_in


@dataclass
class _Assoc:
    src: np.ndarray  # posed model points
    src_n: np.ndarray  # posed model normals
    dst: np.ndarray  # scene points
    n_visible: int


def _associate(pose: Pose, model: OrientedPointCloud, xyz, nmap, K: Intrinsics, p: IcpParams) -> _Assoc:
    pts = pose.apply(model.points)
    nrm = pose.rotate(model.normals)
    # keep points whose normal faces the camera by more than the grazing limit;
    # near-grazing faces are sparsely sampled by the sensor and match poorly
    ray = pts / np.maximum(np.linalg.norm(pts, axis=1), 1e-12)[:, None]
    facing = -np.einsum("ij,ij->i", ray, nrm)
    front = (pts[:, 2] > 1e-6) & (facing > math.cos(p.max_view_angle))
    pts, nrm = np.ascontiguousarray(pts[front]), np.ascontiguousarray(nrm[front])
    pix = np.empty(len(pts), np.int64)
    n_in = _window_match(
        pts, nrm, xyz, nmap, K.fx, K.fy, K.cx, K.cy, p.window_px, p.max_dist**2,
        math.cos(p.max_normal_angle), pix,
    )
    ok = pix >= 0
    flat = xyz.reshape(-1, 3)
    return _Assoc(pts[ok], nrm[ok], flat[pix[ok]], int(n_in))


def _costs(a: _Assoc, wp: float) -> np.ndarray:
    diff = a.dst - a.src
    plane = np.einsum("ij,ij->i", diff, a.src_n)
    return plane * plane + wp * np.einsum("ij,ij->i", diff, diff)


def _trim_keep(c: np.ndarray, trim: float) -> np.ndarray:
    n_keep = len(c) - int(math.floor(trim * len(c)))
    return np.argsort(c, kind="stable")[:n_keep]


def _rms(c: np.ndarray) -> float:
    return float(math.sqrt(np.mean(c))) if len(c) else 0.0


def _solve_update(src, n, dst, wp: float, damping: float) -> Pose:
    """Linearized rigid update minimizing point-to-plane plus weighted point-to-point error.

    The rotation acts about the centroid of ``src``. A Tikhonov term
    (``damping`` times the point count, the rotation part scaled by the
    squared RMS radius) keeps weakly constrained directions, such as sliding
    along a flat face, from taking large steps; it vanishes at a fixed point.
    """
    c = src.mean(axis=0)
    pc = src - c
    diff = dst - src
    rows = [np.hstack([np.cross(pc, n), n])]
    rhs = [np.einsum("ij,ij->i", diff, n)]
    if wp > 0:
        s = math.sqrt(wp)
        # (w x p) + t = q - p, written per axis
        zero = np.zeros(len(src))
        one = np.ones(len(src))
        px, py, pz = pc[:, 0], pc[:, 1], pc[:, 2]
        rows.append(s * np.stack([zero, pz, -py, one, zero, zero], axis=1))
        rows.append(s * np.stack([-pz, zero, px, zero, one, zero], axis=1))
        rows.append(s * np.stack([py, -px, zero, zero, zero, one], axis=1))
        rhs += [s * diff[:, 0], s * diff[:, 1], s * diff[:, 2]]
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    r2 = float(np.mean(np.einsum("ij,ij->i", pc, pc)))
    lam = damping * len(src) * np.array([r2, r2, r2, 1.0, 1.0, 1.0])
    x = np.linalg.solve(A.T @ A + np.diag(lam), A.T @ b)
    R = rotation_vector_matrix(x[:3])
    return Pose(R, c - R @ c + x[3:])


def _objective(c: np.ndarray, trim: float) -> float:
    return _rms(c[_trim_keep(c, trim)])


def _run_stage(pose, model, xyz, nmap, K, p: IcpParams, wp: float, iters: int):
    """One ICP stage with a fixed objective.

    Every iteration takes the solved step; the pose with the lowest
    objective seen so far is kept. Returns (best pose, its association, its
    kept indices, objective of each improving iteration, iterations run).
    """
    a = _associate(pose, model, xyz, nmap, K, p)
    if len(a.src) < p.min_inliers:
        raise NoOverlapError(f"only {len(a.src)} model points associate with the scene")
    c = _costs(a, wp)
    keep = _trim_keep(c, p.trim)
    best = (pose, a, keep, _objective(c, p.trim))
    history = [best[3]]
    it = 0
    for it in range(1, iters + 1):
        step = _solve_update(a.src[keep], a.src_n[keep], a.dst[keep], wp, p.damping)
        pose = step @ pose
        a = _associate(pose, model, xyz, nmap, K, p)
        if len(a.src) < p.min_inliers:
            break
        c = _costs(a, wp)
        keep = _trim_keep(c, p.trim)
        score = _objective(c, p.trim)
        if score <= best[3]:
            best = (pose, a, keep, score)
            history.append(score)
        step_r = float(np.arccos(np.clip((np.trace(step.R) - 1.0) / 2.0, -1.0, 1.0)))
        if float(np.linalg.norm(step.t)) < p.tol and step_r < p.tol:
            break
    return best[0], best[1], best[2], history, it


def projective_icp(
    init: Pose,
    model: OrientedPointCloud,
    scene_depth: DepthImage,
    K: Intrinsics,
    iters: int | None = None,
    trim: float | None = None,
    scene_normals: np.ndarray | None = None,
    params: IcpParams = IcpParams(),
) -> IcpResult:
    """Refine ``init`` against a depth image by projective association.

    Each iteration projects the front-facing model points into the image and
    pairs each with the closest valid scene point in a small pixel window
    around its projection, gated by distance and (where scene normals are
    given) normal angle. The worst ``trim`` share is dropped and a
    linearized rigid update is solved.

    Two stages run with up to ``iters`` iterations each: first point-to-plane
    error (model normals) plus a weak point-to-point term, which also pulls
    along flat faces where planes alone leave a sliding freedom, then pure
    point-to-plane, whose optimum is not biased by the sampling grid. Each
    stage keeps the pose with the lowest trimmed RMS cost it visited.
    ``history`` lists the final stage's objective at every
    iteration that improved on all earlier ones, so it never increases.
    ``residual`` is the point-to-plane RMS over the kept pairs.
    """
    if not model.has_normals:
        raise ValueError("ICP needs model normals")
    if iters is not None:
        params = replace(params, iters=iters)
    if trim is not None:
        params = replace(params, trim=trim)
    xyz = np.ascontiguousarray(backproject_image(scene_depth, K))
    if scene_normals is None:
        nmap = np.zeros_like(xyz)
    else:
        nmap = np.ascontiguousarray(scene_normals, dtype=np.float64)
    if nmap.shape != xyz.shape:
        raise ValueError("scene normal map must be (H, W, 3) like the depth image")

    pose, a, keep, hist1, it1 = init, None, None, [], 0
    if params.point_weight > 0:
        pose, a, keep, hist1, it1 = _run_stage(pose, model, xyz, nmap, K, params, params.point_weight, params.iters)
    pose, a, keep, history, it2 = _run_stage(pose, model, xyz, nmap, K, params, 0.0, params.iters)
    frac = len(keep) / max(a.n_visible, 1)
    res = _rms(_costs(a, 0.0)[keep])
    return IcpResult(pose, res, float(frac), it1 + it2, history, hist1)
