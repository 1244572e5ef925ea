"""Online voting: voxel-grid pair sampling, two-ball voting and peak extraction.

The hot loops live in numba kernels that operate on plain arrays; the classes
here are thin views over those arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .geometry import Pose, canonical_rotation_batch, poses_from_correspondences
from .model_table import ModelTable
from .preprocess import EmptyCloudError, OrientedPointCloud

SMALL, LARGE = 0, 1
BALL_NAMES = ("small", "large")


class RadiusTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class DetectionParams:
    n_alpha_bins: int = 32
    peak_ratio: float = 0.95
    min_votes: int = 3
    reference_stride: int = 1
    spreading_rotation: bool = True
    flags_enabled: bool = True
    two_balls: bool = True
    # all_pairs pairs every reference point with every scene point (no voxel grid)
    all_pairs: bool = False
    # "scene": one flag per (scene pair bucket, alpha bin), then vote the whole
    # spread neighborhood; "bucket": one flag per visited neighbor bucket
    flag_key: str = "bucket"

    def __post_init__(self):
        if not 2 <= self.n_alpha_bins <= 32:
            raise ValueError("n_alpha_bins must lie in [2, 32] to fit a 32-bit flag word")
        if not 0 < self.peak_ratio <= 1:
            raise ValueError("peak_ratio must lie in (0, 1]")
        if self.reference_stride < 1:
            raise ValueError("reference_stride must be >= 1")
        if self.flag_key not in ("scene", "bucket"):
            raise ValueError("flag_key must be 'scene' or 'bucket'")

    @property
    def flag_mode(self) -> int:
        if not self.flags_enabled:
            return 0
        return 1 if self.flag_key == "scene" else 2

    @property
    def alpha_step(self) -> float:
        return 2.0 * math.pi / self.n_alpha_bins

    def alpha_center(self, k):
        return -math.pi + (np.asarray(k) + 0.5) * self.alpha_step


# --- voxel grid ------------------------------------------------------------


@dataclass
class VoxelGrid:
    """Uniform spatial hash: voxel ``v`` holds ``cell_points[cell_start[v]:cell_start[v+1]]``."""

    points: np.ndarray
    cell_size: float
    origin: np.ndarray
    dims: np.ndarray
    cell_start: np.ndarray
    cell_points: np.ndarray
    point_to_voxel: np.ndarray

    def voxel_coords(self, p) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.origin) / self.cell_size).astype(np.int64)

    def flat(self, c) -> int:
        c = np.asarray(c)
        return int((c[..., 0] * self.dims[1] + c[..., 1]) * self.dims[2] + c[..., 2])

    def unflat(self, v: int) -> tuple[int, int, int]:
        z = v % self.dims[2]
        v //= self.dims[2]
        return int(v // self.dims[1]), int(v % self.dims[1]), int(z)

    @property
    def cells(self) -> dict[int, np.ndarray]:
        """Non-empty voxels as {flat voxel index: point indices}."""
        out = {}
        for v in np.nonzero(np.diff(self.cell_start))[0]:
            out[int(v)] = self.cell_points[self.cell_start[v] : self.cell_start[v + 1]]
        return out


def build_voxel_grid(cloud: OrientedPointCloud | np.ndarray, cell_size: float) -> VoxelGrid:
    pts = cloud.points if isinstance(cloud, OrientedPointCloud) else np.asarray(cloud, dtype=float)
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(pts) == 0:
        raise EmptyCloudError("cannot grid an empty cloud")
    origin = pts.min(axis=0)
    coords = np.floor((pts - origin) / cell_size).astype(np.int64)
    dims = coords.max(axis=0) + 1
    flat = (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]
    n_cells = int(np.prod(dims))
    order = np.argsort(flat, kind="stable")
    start = np.zeros(n_cells + 1, np.int64)
    np.cumsum(np.bincount(flat, minlength=n_cells), out=start[1:])
    return VoxelGrid(
        points=np.ascontiguousarray(pts, dtype=np.float64),
        cell_size=float(cell_size),
        origin=origin,
        dims=dims.astype(np.int64),
        cell_start=start,
        cell_points=order.astype(np.int64),
        point_to_voxel=flat.astype(np.int64),
    )


@numba.njit(cache=True)
def _ball_kernel(c, pts, dims, cell_start, cell_points, p2v, r2):
    out = np.empty(pts.shape[0], np.int64)
    n = 0
    v = p2v[c]
    cz = v % dims[2]
    cy = (v // dims[2]) % dims[1]
    cx = v // (dims[2] * dims[1])
    for ix in range(max(cx - 1, 0), min(cx + 2, dims[0])):
        for iy in range(max(cy - 1, 0), min(cy + 2, dims[1])):
            for iz in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                w = (ix * dims[1] + iy) * dims[2] + iz
                for q in range(cell_start[w], cell_start[w + 1]):
                    j = cell_points[q]
                    if j == c:
                        continue
                    dx = pts[j, 0] - pts[c, 0]
                    dy = pts[j, 1] - pts[c, 1]
                    dz = pts[j, 2] - pts[c, 2]
                    if dx * dx + dy * dy + dz * dz <= r2:
                        out[n] = j
                        n += 1
    return np.sort(out[:n])


def query_ball(grid: VoxelGrid, center_index: int, radius: float) -> np.ndarray:
    """Indices (ascending) of points within ``radius`` of point ``center_index``, itself excluded."""
    if radius > grid.cell_size:
        raise RadiusTooLargeError(f"radius {radius} exceeds the grid cell size {grid.cell_size}")
    return _ball_kernel(
        int(center_index), grid.points, grid.dims, grid.cell_start, grid.cell_points,
        grid.point_to_voxel, radius * radius,
    )


# --- flags and accumulator ------------------------------------------------


@numba.njit(cache=True)
def _try_set(bits, touched, n_touched, key, bit):
    w = bits[key]
    m = np.uint32(1) << np.uint32(bit)
    if w & m:
        return False
    if w == 0:
        touched[n_touched[0]] = key
        n_touched[0] += 1
    bits[key] = w | m
    return True


@numba.njit(cache=True)
def _clear_flags(bits, touched, n_touched):
    for i in range(n_touched[0]):
        bits[touched[i]] = 0
    n_touched[0] = 0


class VoteFlags:
    """One 32-bit word per quantized-PPF bucket, one bit per scene alpha bin."""

    def __init__(self, n_keys: int, n_alpha_bins: int = 32):
        if n_alpha_bins > 32:
            raise ValueError("at most 32 alpha bins fit a flag word")
        self.n_alpha_bins = n_alpha_bins
        self.bits = np.zeros(n_keys, np.uint32)
        self.touched = np.zeros(n_keys, np.int64)
        self.n_touched = np.zeros(1, np.int64)

    def try_set(self, index: int, alpha_bin: int) -> bool:
        if not 0 <= alpha_bin < self.n_alpha_bins:
            raise ValueError(f"alpha bin {alpha_bin} out of range [0, {self.n_alpha_bins})")
        return bool(_try_set(self.bits, self.touched, self.n_touched, index, alpha_bin))

    def reset(self) -> None:
        _clear_flags(self.bits, self.touched, self.n_touched)

    @property
    def touched_indices(self) -> np.ndarray:
        return self.touched[: self.n_touched[0]]


def try_set_flag(flags: VoteFlags, qppf_index: int, alpha_scene_bin: int) -> bool:
    return flags.try_set(qppf_index, alpha_scene_bin)


class Accumulator:
    """Vote tallies over (model point, alpha bin) for one scene reference point."""

    def __init__(self, n_model_points: int, n_alpha_bins: int = 32):
        self.counts = np.zeros((n_model_points, n_alpha_bins), np.int32)

    def reset(self) -> None:
        self.counts[:] = 0


# --- voting kernels ----------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _acos(c):
    if c > 1.0:
        c = 1.0
    elif c < -1.0:
        c = -1.0
    return math.acos(c)


@numba.njit(cache=True)
def _vote_pair(
    r, j, pts, nrm, Rr, offsets, m_off, a_off, n_ang, n_dist, dist_step, angle_step,
    nb_start, nb_keys, n_alpha, spread_rot, use_flags, acc, bits, touched, n_touched,
):
    """Cast the votes of pair (r, j); returns the number of votes.

    Buckets are addressed by compact id (see ``ModelTable.spread_index``):
    ``offsets`` is the compact bucket start array and ``nb_keys`` the ids
    visited from each key.

    ``m_off[e]`` is the model index times n_alpha and ``a_off[e]`` is
    ``(alpha_model + pi) / alpha_step``, so the vote bin is
    ``floor(a_off - alpha_scene / alpha_step)`` taken modulo n_alpha.
    """
    dx = pts[j, 0] - pts[r, 0]
    dy = pts[j, 1] - pts[r, 1]
    dz = pts[j, 2] - pts[r, 2]
    dist = math.sqrt(dx * dx + dy * dy + dz * dz)
    if dist <= 1e-12:
        return 0
    ux, uy, uz = dx / dist, dy / dist, dz / dist
    f1 = _acos(nrm[r, 0] * ux + nrm[r, 1] * uy + nrm[r, 2] * uz)
    f2 = _acos(nrm[j, 0] * ux + nrm[j, 1] * uy + nrm[j, 2] * uz)
    f3 = _acos(nrm[r, 0] * nrm[j, 0] + nrm[r, 1] * nrm[j, 1] + nrm[r, 2] * nrm[j, 2])
    qd = min(int(math.floor(dist / dist_step)), n_dist - 1)
    q1 = min(int(math.floor(f1 / angle_step)), n_ang - 1)
    q2 = min(int(math.floor(f2 / angle_step)), n_ang - 1)
    q3 = min(int(math.floor(f3 / angle_step)), n_ang - 1)

    ly = Rr[1, 0] * dx + Rr[1, 1] * dy + Rr[1, 2] * dz
    lz = Rr[2, 0] * dx + Rr[2, 1] * dy + Rr[2, 2] * dz
    two_pi = 2.0 * math.pi
    a_s = -math.atan2(lz, ly)
    a_s = (a_s + math.pi) % two_pi - math.pi
    a_step = two_pi / n_alpha
    a_bin = int(math.floor((a_s + math.pi) / a_step)) % n_alpha
    pow2 = (n_alpha & (n_alpha - 1)) == 0
    mask = n_alpha - 1

    votes = 0
    q_key = ((q1 * n_ang + q2) * n_ang + q3) * n_dist + qd
    t0 = nb_start[q_key]
    t1 = nb_start[q_key + 1]
    if t0 == t1:
        return 0
    # rotation bins a_bin - 1, a_bin, a_bin + 1 (slots 0, 1, 2); without
    # rotation spreading only slot 1 is used
    fm0 = np.uint32(1) << np.uint32((a_bin - 1) % n_alpha)
    fm1 = np.uint32(1) << np.uint32(a_bin)
    fm2 = np.uint32(1) << np.uint32((a_bin + 1) % n_alpha)
    g0 = spread_rot
    g1 = True
    g2 = spread_rot
    # flag mode 1 gates every bin on the scene pair's own bucket; mode 2
    # gates each visited bucket separately. The flag tests are written out
    # (not calls): array arguments make a call cost more than the test itself
    if use_flags == 1:
        w = bits[q_key]
        w0 = w
        if g0:
            if w & fm0:
                g0 = False
            else:
                w |= fm0
        if w & fm1:
            g1 = False
        else:
            w |= fm1
        if g2:
            if w & fm2:
                g2 = False
            else:
                w |= fm2
        if w != w0:
            if w0 == 0:
                touched[n_touched[0]] = q_key
                n_touched[0] += 1
            bits[q_key] = w
        if not (g0 or g1 or g2):
            return 0
    # positive offsets (multiples of n_alpha) keep truncation equal to floor
    base = 4.0 * n_alpha - a_s / a_step
    sh0 = base + 1.0
    sh1 = base
    sh2 = base - 1.0
    for t in range(t0, t1):
        c = nb_keys[t]
        k0, k1, k2 = g0, g1, g2
        if use_flags == 2:
            w = bits[c]
            w0 = w
            if k0:
                if w & fm0:
                    k0 = False
                else:
                    w |= fm0
            if w & fm1:
                k1 = False
            else:
                w |= fm1
            if k2:
                if w & fm2:
                    k2 = False
                else:
                    w |= fm2
            if w != w0:
                if w0 == 0:
                    touched[n_touched[0]] = c
                    n_touched[0] += 1
                bits[c] = w
            if not (k0 or k1 or k2):
                continue
        s0 = offsets[c]
        s1 = offsets[c + 1]
        if pow2:
            for e in range(s0, s1):
                v = a_off[e]
                m = m_off[e]
                if k0:
                    acc[m + (int(v + sh0) & mask)] += 1
                if k1:
                    acc[m + (int(v + sh1) & mask)] += 1
                if k2:
                    acc[m + (int(v + sh2) & mask)] += 1
        else:
            for e in range(s0, s1):
                v = a_off[e]
                m = m_off[e]
                if k0:
                    acc[m + int(v + sh0) % n_alpha] += 1
                if k1:
                    acc[m + int(v + sh1) % n_alpha] += 1
                if k2:
                    acc[m + int(v + sh2) % n_alpha] += 1
        votes += (int(k0) + int(k1) + int(k2)) * (s1 - s0)
    return votes


@numba.njit(cache=True)
def _vote_ref(
    r, pts, nrm, Rr, dims, cell_start, cell_points, p2v, all_pairs, r_in2, r_out2,
    offsets, m_off, a_off, n_ang, n_dist, dist_step, angle_step, nb_start, nb_keys,
    n_alpha, spread_rot, use_flags, acc, bits, touched, n_touched, stats, sink,
):
    """Vote all pairs (r, j) with r_in2 < |p_j - p_r|^2 <= r_out2.

    stats[0] += pairs examined, stats[1] += pairs in range, stats[2] += votes cast.
    """
    if all_pairs:
        for j in range(pts.shape[0]):
            if j == r:
                continue
            stats[0] += 1
            dx = pts[j, 0] - pts[r, 0]
            dy = pts[j, 1] - pts[r, 1]
            dz = pts[j, 2] - pts[r, 2]
            d2 = dx * dx + dy * dy + dz * dz
            # exhaustive pairing evaluates the feature before the range lookup fails
            sink[0] += _pair_feature_cost(r, j, pts, nrm, Rr)
            if d2 <= r_in2 or d2 > r_out2:
                continue
            stats[1] += 1
            stats[2] += _vote_pair(
                r, j, pts, nrm, Rr, offsets, m_off, a_off, n_ang, n_dist, dist_step,
                angle_step, nb_start, nb_keys, n_alpha, spread_rot, use_flags, acc, bits,
                touched, n_touched,
            )
        return
    v = p2v[r]
    cz = v % dims[2]
    cy = (v // dims[2]) % dims[1]
    cx = v // (dims[2] * dims[1])
    for ix in range(max(cx - 1, 0), min(cx + 2, dims[0])):
        for iy in range(max(cy - 1, 0), min(cy + 2, dims[1])):
            for iz in range(max(cz - 1, 0), min(cz + 2, dims[2])):
                w = (ix * dims[1] + iy) * dims[2] + iz
                for q in range(cell_start[w], cell_start[w + 1]):
                    j = cell_points[q]
                    if j == r:
                        continue
                    stats[0] += 1
                    dx = pts[j, 0] - pts[r, 0]
                    dy = pts[j, 1] - pts[r, 1]
                    dz = pts[j, 2] - pts[r, 2]
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 <= r_in2 or d2 > r_out2:
                        continue
                    stats[1] += 1
                    stats[2] += _vote_pair(
                        r, j, pts, nrm, Rr, offsets, m_off, a_off, n_ang, n_dist,
                        dist_step, angle_step, nb_start, nb_keys, n_alpha, spread_rot, use_flags,
                        acc, bits, touched, n_touched,
                    )


@numba.njit(cache=True)
def _pair_feature_cost(r, j, pts, nrm, Rr):
    # Feature + alpha of a pair whose result is discarded; keeps the exhaustive
    # mode's per-pair work equal to a real lookup attempt.
    dx = pts[j, 0] - pts[r, 0]
    dy = pts[j, 1] - pts[r, 1]
    dz = pts[j, 2] - pts[r, 2]
    dist = math.sqrt(dx * dx + dy * dy + dz * dz) + 1e-300
    f1 = _acos((nrm[r, 0] * dx + nrm[r, 1] * dy + nrm[r, 2] * dz) / dist)
    f2 = _acos((nrm[j, 0] * dx + nrm[j, 1] * dy + nrm[j, 2] * dz) / dist)
    f3 = _acos(nrm[r, 0] * nrm[j, 0] + nrm[r, 1] * nrm[j, 1] + nrm[r, 2] * nrm[j, 2])
    ly = Rr[1, 0] * dx + Rr[1, 1] * dy + Rr[1, 2] * dz
    lz = Rr[2, 0] * dx + Rr[2, 1] * dy + Rr[2, 2] * dz
    return f1 + f2 + f3 + math.atan2(lz, ly)


@numba.njit(cache=True)
def _peaks(acc, n_alpha, peak_ratio, min_votes, out_m, out_a, out_v):
    best = 0
    for i in range(acc.shape[0]):
        if acc[i] > best:
            best = acc[i]
    if best < min_votes:
        return 0
    thr = peak_ratio * best
    n = 0
    for i in range(acc.shape[0]):
        c = acc[i]
        if c >= thr and c >= min_votes:
            if n < out_m.shape[0]:
                out_m[n] = i // n_alpha
                out_a[n] = i % n_alpha
                out_v[n] = c
            n += 1
    return n


@numba.njit(cache=True)
def _grow(a, n):
    out = np.empty(max(2 * a.shape[0], n), a.dtype)
    out[: a.shape[0]] = a
    return out


@numba.njit(cache=True)
def _detect_kernel(
    refs, pts, nrm, Rs, dims, cell_start, cell_points, p2v, all_pairs, r_small, r_large,
    two_balls, offsets, m_off, a_off, n_model, n_ang, n_dist, dist_step, angle_step,
    nb_start, nb_keys, n_alpha, spread_rot, use_flags, peak_ratio, min_votes,
):
    acc = np.zeros(n_model * n_alpha, np.int32)
    n_keys = nb_start.shape[0] - 1
    bits = np.zeros(n_keys, np.uint32)
    touched = np.zeros(n_keys, np.int64)
    n_touched = np.zeros(1, np.int64)
    stats = np.zeros(3, np.int64)
    sink = np.zeros(1)

    cap = 1024
    h_ref = np.empty(cap, np.int64)
    h_m = np.empty(cap, np.int64)
    h_a = np.empty(cap, np.int64)
    h_v = np.empty(cap, np.int64)
    h_b = np.empty(cap, np.int64)
    n_h = 0
    pk_m = np.empty(n_model * n_alpha, np.int64)
    pk_a = np.empty(n_model * n_alpha, np.int64)
    pk_v = np.empty(n_model * n_alpha, np.int64)

    rs2 = r_small * r_small
    rl2 = r_large * r_large
    for ri in range(refs.shape[0]):
        r = refs[ri]
        for ball in range(2):
            if ball == 0:
                if not two_balls:
                    continue
                r_in2, r_out2 = -1.0, rs2
            else:
                r_in2 = rs2 if two_balls else -1.0
                r_out2 = rl2
            _vote_ref(
                r, pts, nrm, Rs[r], dims, cell_start, cell_points, p2v, all_pairs, r_in2,
                r_out2, offsets, m_off, a_off, n_ang, n_dist, dist_step, angle_step,
                nb_start, nb_keys, n_alpha, spread_rot, use_flags, acc, bits, touched, n_touched,
                stats, sink,
            )
            k = _peaks(acc, n_alpha, peak_ratio, min_votes, pk_m, pk_a, pk_v)
            if n_h + k > h_ref.shape[0]:
                h_ref = _grow(h_ref, n_h + k)
                h_m = _grow(h_m, n_h + k)
                h_a = _grow(h_a, n_h + k)
                h_v = _grow(h_v, n_h + k)
                h_b = _grow(h_b, n_h + k)
            for i in range(k):
                h_ref[n_h] = r
                h_m[n_h] = pk_m[i]
                h_a[n_h] = pk_a[i]
                h_v[n_h] = pk_v[i]
                h_b[n_h] = ball
                n_h += 1
        acc[:] = 0
        _clear_flags(bits, touched, n_touched)
    return h_ref[:n_h], h_m[:n_h], h_a[:n_h], h_v[:n_h], h_b[:n_h], stats, sink[0]


# --- hypotheses --------------------------------------------------------------


@dataclass(frozen=True)
class Hypothesis:
    pose: Pose
    scene_ref_index: int
    model_ref_index: int
    alpha: float
    votes: int
    ball: str


@dataclass
class HypothesisSet:
    """Struct-of-arrays list of hypotheses; indexing yields :class:`Hypothesis`."""

    R: np.ndarray
    t: np.ndarray
    scene_ref: np.ndarray
    model_ref: np.ndarray
    alpha: np.ndarray
    votes: np.ndarray
    ball: np.ndarray

    @classmethod
    def empty(cls) -> "HypothesisSet":
        z = np.zeros(0, np.int64)
        return cls(np.zeros((0, 3, 3)), np.zeros((0, 3)), z, z, np.zeros(0), z, z)

    @classmethod
    def from_list(cls, hyps) -> "HypothesisSet":
        hyps = list(hyps)
        if not hyps:
            return cls.empty()
        return cls(
            np.array([h.pose.R for h in hyps]),
            np.array([h.pose.t for h in hyps]),
            np.array([h.scene_ref_index for h in hyps], np.int64),
            np.array([h.model_ref_index for h in hyps], np.int64),
            np.array([h.alpha for h in hyps], float),
            np.array([h.votes for h in hyps], np.int64),
            np.array([BALL_NAMES.index(h.ball) for h in hyps], np.int64),
        )

    def __len__(self) -> int:
        return len(self.votes)

    def __getitem__(self, i) -> Hypothesis:
        return Hypothesis(
            Pose(self.R[i], self.t[i]),
            int(self.scene_ref[i]),
            int(self.model_ref[i]),
            float(self.alpha[i]),
            int(self.votes[i]),
            BALL_NAMES[int(self.ball[i])],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "HypothesisSet":
        return HypothesisSet(
            self.R[idx], self.t[idx], self.scene_ref[idx], self.model_ref[idx],
            self.alpha[idx], self.votes[idx], self.ball[idx],
        )

    def best(self) -> Hypothesis | None:
        if len(self) == 0:
            return None
        return self[int(np.argmax(self.votes))]


@dataclass
class RawDetections:
    small: HypothesisSet
    large: HypothesisSet
    stats: dict = field(default_factory=dict)

    def __iter__(self):
        # unpacks as (small, large)
        return iter((self.small, self.large))

    def all(self) -> HypothesisSet:
        parts = [self.small, self.large]
        return HypothesisSet(*(np.concatenate([getattr(p, f) for p in parts]) for f in (
            "R", "t", "scene_ref", "model_ref", "alpha", "votes", "ball")))


def _table_arrays(table: ModelTable, n_alpha: int):
    q = table.quant
    m_off, a_off = table.vote_arrays(n_alpha)
    nb_start, nb_ids, bucket_start = table.spread_index()
    return (
        bucket_start,
        m_off,
        a_off,
        q.n_angle_bins,
        q.n_dist_bins,
        q.dist_step,
        q.angle_step,
        nb_start,
        nb_ids,
    )


def vote_reference_point(
    ref_index: int,
    scene: OrientedPointCloud,
    grid: VoxelGrid | None,
    table: ModelTable,
    params: DetectionParams,
    ball_radius: float,
    exclude_radius: float | None,
    acc: Accumulator,
    flags: VoteFlags,
) -> dict:
    """Cast the votes of one reference point for second points in the (annular) ball.

    ``grid`` may be None only with ``params.all_pairs``. Returns pair/vote counters.
    """
    offsets, m_off, a_off, n_ang, n_dist, dstep, astep, nb_start, nb_keys = _table_arrays(table, params.n_alpha_bins)
    pts = np.ascontiguousarray(scene.points)
    nrm = np.ascontiguousarray(scene.normals)
    Rr = canonical_rotation_batch(nrm[ref_index : ref_index + 1])[0]
    if grid is None:
        if not params.all_pairs:
            raise ValueError("a voxel grid is required unless all_pairs is set")
        dims = np.ones(3, np.int64)
        cs, cp, p2v = np.zeros(2, np.int64), np.zeros(0, np.int64), np.zeros(len(pts), np.int64)
    else:
        if ball_radius > grid.cell_size and not params.all_pairs:
            raise RadiusTooLargeError("ball radius exceeds the grid cell size")
        dims, cs, cp, p2v = grid.dims, grid.cell_start, grid.cell_points, grid.point_to_voxel
    r_in2 = -1.0 if exclude_radius is None else exclude_radius**2
    stats = np.zeros(3, np.int64)
    flat = acc.counts.reshape(-1)
    _vote_ref(
        int(ref_index), pts, nrm, Rr, dims, cs, cp, p2v, params.all_pairs, r_in2,
        ball_radius**2, offsets, m_off, a_off, n_ang, n_dist, dstep, astep, nb_start, nb_keys,
        params.n_alpha_bins, params.spreading_rotation, params.flag_mode, flat,
        flags.bits, flags.touched, flags.n_touched, stats, np.zeros(1),
    )
    return {"pairs_examined": int(stats[0]), "pairs_in_range": int(stats[1]), "votes": int(stats[2])}


def extract_peaks(
    acc: Accumulator,
    ref_index: int,
    params: DetectionParams,
    table: ModelTable,
    scene: OrientedPointCloud,
    ball: str = "large",
) -> HypothesisSet:
    """Cells with at least ``peak_ratio`` of the maximum (and >= min_votes), as poses."""
    counts = acc.counts
    n = counts.size
    m = np.empty(n, np.int64)
    a = np.empty(n, np.int64)
    v = np.empty(n, np.int64)
    k = _peaks(counts.reshape(-1), counts.shape[1], params.peak_ratio, params.min_votes, m, a, v)
    refs = np.full(k, ref_index, np.int64)
    return _make_hypotheses(refs, m[:k], a[:k], v[:k], np.full(k, BALL_NAMES.index(ball)), scene, table, params)


def _make_hypotheses(refs, m, a, v, b, scene, table, params) -> HypothesisSet:
    if len(refs) == 0:
        return HypothesisSet.empty()
    alpha = params.alpha_center(a)
    mc = table.model_cloud
    R, t = poses_from_correspondences(
        scene.points[refs], scene.normals[refs], mc.points[m], mc.normals[m], alpha
    )
    return HypothesisSet(R, t, refs, m, alpha, v, b)


def detect_raw(scene: OrientedPointCloud, table: ModelTable, params: DetectionParams | None = None) -> RawDetections:
    """Two-pass voting for every ``reference_stride``-th scene point.

    Pass one uses the small ball ``R_min``; its peaks are snapshotted before
    pass two keeps filling the same accumulator with pairs in ``(R_min, R_max]``.
    With ``two_balls`` off only the large ball is voted.
    """
    params = params or DetectionParams()
    if len(scene) < 2:
        return RawDetections(HypothesisSet.empty(), HypothesisSet.empty(), {"pairs_examined": 0, "pairs_in_range": 0, "votes": 0})
    if not scene.has_normals:
        raise ValueError("scene needs normals")
    pts = np.ascontiguousarray(scene.points, dtype=np.float64)
    nrm = np.ascontiguousarray(scene.normals, dtype=np.float64)
    Rs = canonical_rotation_batch(nrm)
    r_small, r_large = table.r_min, table.r_max
    grid = build_voxel_grid(pts, r_large)
    refs = np.arange(0, len(pts), params.reference_stride, dtype=np.int64)
    offsets, m_off, a_off, n_ang, n_dist, dstep, astep, nb_start, nb_keys = _table_arrays(table, params.n_alpha_bins)
    h_ref, h_m, h_a, h_v, h_b, stats, _ = _detect_kernel(
        refs, pts, nrm, Rs, grid.dims, grid.cell_start, grid.cell_points, grid.point_to_voxel,
        params.all_pairs, r_small, r_large, params.two_balls, offsets, m_off, a_off,
        table.n_model_points, n_ang, n_dist, dstep, astep, nb_start, nb_keys, params.n_alpha_bins,
        params.spreading_rotation, params.flag_mode, params.peak_ratio, params.min_votes,
    )
    hyps = _make_hypotheses(h_ref, h_m, h_a, h_v, h_b, scene, table, params)
    small = hyps.subset(np.nonzero(h_b == SMALL)[0])
    large = hyps.subset(np.nonzero(h_b == LARGE)[0])
    info = {
        "pairs_examined": int(stats[0]),
        "pairs_in_range": int(stats[1]),
        "votes": int(stats[2]),
        "n_reference_points": int(len(refs)),
        "n_scene_points": int(len(pts)),
        "r_min": r_small,
        "r_max": r_large,
    }
    return RawDetections(small, large, info)


def with_params(params: DetectionParams, **kw) -> DetectionParams:
    return replace(params, **kw)
