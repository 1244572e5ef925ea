"""PPF quantization and the model lookup table.

Flattened bucket layout (portable across saved tables)::

    key = ((a1 * A + a2) * A + a3) * D + dist

with ``A`` angle bins and ``D`` distance bins (22 and 40 by default).

Neighbor spreading is stored implicitly: a spread table keeps each pair in its
exact bucket and :meth:`ModelTable.lookup` returns the union of the exact
bucket and its (up to) 80 adjacent buckets. This yields the same lookup
multiset as physically copying every entry into the adjacent buckets, at 1/81
of the memory.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .geometry import canonical_rotation_batch, compute_ppf_batch, wrap_angle
from .preprocess import OrientedPointCloud

MAGIC = b"PPF1"
FORMAT_VERSION = 1


class TableFormatError(ValueError):
    """Corrupt or truncated table file."""

    def __init__(self, msg: str, offset: int | None = None):
        self.offset = offset
        super().__init__(msg if offset is None else f"{msg} (at byte offset {offset})")


class TableVersionError(TableFormatError):
    """Wrong magic or unsupported format version."""


@dataclass(frozen=True)
class QuantizationParams:
    dist_step: float
    n_angle_bins: int = 22
    n_dist_bins: int = 40

    def __post_init__(self):
        if not self.dist_step > 0:
            raise ValueError("dist_step must be positive")
        if self.n_angle_bins < 2 or self.n_dist_bins < 2:
            raise ValueError("need at least 2 bins per dimension")

    @classmethod
    def for_diameter(cls, d_obj: float, n_angle_bins: int = 22, n_dist_bins: int = 40):
        return cls(d_obj / n_dist_bins, n_angle_bins, n_dist_bins)

    @property
    def angle_step(self) -> float:
        return math.pi / self.n_angle_bins

    @property
    def n_keys(self) -> int:
        return self.n_angle_bins**3 * self.n_dist_bins


class QuantizedPPF(NamedTuple):
    dist: int
    a1: int
    a2: int
    a3: int

    def index(self, q: QuantizationParams) -> int:
        A, D = q.n_angle_bins, q.n_dist_bins
        return ((self.a1 * A + self.a2) * A + self.a3) * D + self.dist

    @classmethod
    def from_index(cls, key: int, q: QuantizationParams) -> "QuantizedPPF":
        A, D = q.n_angle_bins, q.n_dist_bins
        dist = key % D
        key //= D
        a3 = key % A
        key //= A
        return cls(dist, key // A, key % A, a3)


def quantize_ppf(f, q: QuantizationParams) -> QuantizedPPF:
    """Floor each component by its step, clamping to the top bin."""
    v = f.as_array() if hasattr(f, "as_array") else np.asarray(f, dtype=float)
    d = min(int(math.floor(v[0] / q.dist_step)), q.n_dist_bins - 1)
    a = [min(int(math.floor(x / q.angle_step)), q.n_angle_bins - 1) for x in v[1:]]
    return QuantizedPPF(max(d, 0), *(max(x, 0) for x in a))


def quantize_ppf_batch(f: np.ndarray, q: QuantizationParams) -> np.ndarray:
    """Flattened bucket keys for an (N, 4) array of features."""
    f = np.asarray(f, dtype=float)
    d = np.clip(np.floor(f[:, 0] / q.dist_step), 0, q.n_dist_bins - 1).astype(np.int64)
    a = np.clip(np.floor(f[:, 1:] / q.angle_step), 0, q.n_angle_bins - 1).astype(np.int64)
    A, D = q.n_angle_bins, q.n_dist_bins
    return ((a[:, 0] * A + a[:, 1]) * A + a[:, 2]) * D + d


def neighbor_indices(qf: QuantizedPPF, q: QuantizationParams) -> list[QuantizedPPF]:
    """In-range buckets differing by at most one in every coordinate, excluding ``qf``."""
    limits = (q.n_dist_bins, q.n_angle_bins, q.n_angle_bins, q.n_angle_bins)
    out = []
    for delta in itertools.product((-1, 0, 1), repeat=4):
        if delta == (0, 0, 0, 0):
            continue
        c = tuple(v + dv for v, dv in zip(qf, delta))
        if all(0 <= ci < lim for ci, lim in zip(c, limits)):
            out.append(QuantizedPPF(*c))
    return out


def neighborhood_sizes(q: QuantizationParams) -> np.ndarray:
    """Per-key count of in-range buckets in the 3^4 block (including the key itself)."""
    A, D = q.n_angle_bins, q.n_dist_bins

    def edge(n):
        s = np.full(n, 3, np.int64)
        s[0] -= 1
        s[-1] -= 1
        return s

    sa, sd = edge(A), edge(D)
    return np.einsum("i,j,k,l->ijkl", sa, sa, sa, sd).reshape(-1)


def point_set_diameter(points: np.ndarray) -> float:
    """Largest pairwise distance (hull vertices only when a hull exists)."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    if len(pts) > 50:
        try:
            pts = pts[ConvexHull(pts).vertices]
        except QhullError:
            pass
    return float(pdist(pts).max())


def bbox_dims(points: np.ndarray) -> tuple[float, float, float]:
    """Sorted axis-aligned extents (d_min, d_med, d_max)."""
    ext = np.sort(np.ptp(np.asarray(points, dtype=float), axis=0))
    return float(ext[0]), float(ext[1]), float(ext[2])


def pair_features(cloud: OrientedPointCloud) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """All ordered pairs (i != j): returns (i, j, features (P, 4), alpha (P,))."""
    p, n = cloud.points, cloud.normals
    N = len(p)
    ii, jj = np.nonzero(~np.eye(N, dtype=bool))
    feats = compute_ppf_batch(p[ii], n[ii], p[jj], n[jj])
    R = canonical_rotation_batch(n)
    local = np.einsum("pij,pj->pi", R[ii], p[jj] - p[ii])
    alpha = wrap_angle(-np.arctan2(local[:, 2], local[:, 1]))
    return ii, jj, feats, alpha


@dataclass
class ModelTable:
    """Lookup table from quantized PPF to (model point, alpha_model) entries.

    Buckets are stored in CSR form over exact keys: bucket ``k`` holds
    ``model_index[offsets[k]:offsets[k+1]]`` and the matching ``alpha``.
    """

    offsets: np.ndarray
    model_index: np.ndarray
    alpha: np.ndarray
    model_cloud: OrientedPointCloud
    d_obj: float
    bbox_dims: tuple[float, float, float]
    quant: QuantizationParams
    spread: bool = True
    meta: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.offsets) != self.quant.n_keys + 1:
            raise ValueError("offsets length does not match quantization")
        if len(self.model_index) and (
            self.model_index.min() < 0 or self.model_index.max() >= len(self.model_cloud)
        ):
            raise ValueError("table references a model point out of range")

    @property
    def n_model_points(self) -> int:
        return len(self.model_cloud)

    @property
    def r_min(self) -> float:
        d_min, d_med, _ = self.bbox_dims
        return math.sqrt(d_min * d_min + d_med * d_med)

    @property
    def r_max(self) -> float:
        return self.d_obj

    @property
    def n_exact_entries(self) -> int:
        return len(self.model_index)

    @property
    def n_entries(self) -> int:
        """Entry count as if every pair were copied into its whole neighborhood."""
        if not self.spread:
            return self.n_exact_entries
        sizes = np.diff(self.offsets)
        return int(np.dot(sizes, neighborhood_sizes(self.quant)))

    def exact_bucket(self, key: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.offsets[key], self.offsets[key + 1]
        return self.model_index[a:b], self.alpha[a:b]

    def lookup_keys(self, key: int) -> list[int]:
        if not self.spread:
            return [key]
        qf = QuantizedPPF.from_index(key, self.quant)
        return [key] + [nb.index(self.quant) for nb in neighbor_indices(qf, self.quant)]

    def lookup(self, key: int) -> tuple[np.ndarray, np.ndarray]:
        """Entries visible from bucket ``key`` (model indices, alpha_model)."""
        parts = [self.exact_bucket(k) for k in self.lookup_keys(key)]
        return (
            np.concatenate([p[0] for p in parts]),
            np.concatenate([p[1] for p in parts]),
        )

    def vote_arrays(self, n_alpha: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-entry accumulator row offset and alpha in units of the rotation bin.

        Returns ``model_index * n_alpha`` (int32) and
        ``(alpha + pi) / (2 pi / n_alpha)`` (float32), cached per ``n_alpha``.
        """
        cache = self._cache.setdefault("vote_arrays", {})
        if n_alpha not in cache:
            step = 2.0 * math.pi / n_alpha
            cache[n_alpha] = (
                (self.model_index.astype(np.int64) * n_alpha).astype(np.int32),
                ((self.alpha.astype(np.float64) + math.pi) / step).astype(np.float32),
            )
        return cache[n_alpha]

    def spread_index(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Compact map from a key to the non-empty buckets its lookup visits.

        Non-empty buckets get dense ids ``c`` (ascending key order); bucket
        ``c`` holds entries ``bucket_start[c]:bucket_start[c+1]``. The ids
        visited from key ``k`` are ``nb_ids[nb_start[k]:nb_start[k+1]]``,
        exactly the non-empty members of :meth:`lookup_keys` ``(k)``. Cached.
        """
        if "spread_index" in self._cache:
            return self._cache["spread_index"]
        q = self.quant
        A, D = q.n_angle_bins, q.n_dist_bins
        src = np.nonzero(np.diff(self.offsets))[0]
        ids = np.arange(len(src))
        if self.spread:
            d = src % D
            rest = src // D
            a3 = rest % A
            a2 = (rest // A) % A
            a1 = rest // (A * A)
            deltas = np.array(list(itertools.product((-1, 0, 1), repeat=4)))
            c1 = a1[:, None] + deltas[None, :, 0]
            c2 = a2[:, None] + deltas[None, :, 1]
            c3 = a3[:, None] + deltas[None, :, 2]
            cd = d[:, None] + deltas[None, :, 3]
            ok = (c1 >= 0) & (c1 < A) & (c2 >= 0) & (c2 < A) & (c3 >= 0) & (c3 < A) & (cd >= 0) & (cd < D)
            # neighborhoods are symmetric: bucket s is visited from every key in its block
            dst = (((c1 * A + c2) * A + c3) * D + cd)[ok]
            vis = np.broadcast_to(ids[:, None], ok.shape)[ok]
        else:
            dst, vis = src, ids
        order = np.lexsort((vis, dst))
        nb_start = np.zeros(q.n_keys + 1, np.int32)
        np.cumsum(np.bincount(dst, minlength=q.n_keys), out=nb_start[1:])
        bucket_start = np.append(self.offsets[src], self.offsets[-1]).astype(np.int64)
        out = (nb_start, vis[order].astype(np.int32), bucket_start)
        self._cache["spread_index"] = out
        return out

    def equals(self, other: "ModelTable") -> bool:
        return (
            np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.model_index, other.model_index)
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.model_cloud.points, other.model_cloud.points)
            and np.array_equal(self.model_cloud.normals, other.model_cloud.normals)
            and self.d_obj == other.d_obj
            and tuple(self.bbox_dims) == tuple(other.bbox_dims)
            and self.quant == other.quant
            and self.spread == other.spread
        )


def build_model_table(
    model: OrientedPointCloud,
    d_obj: float | None = None,
    dims: tuple[float, float, float] | None = None,
    q: QuantizationParams | None = None,
    spreading: bool = True,
) -> ModelTable:
    """Index every ordered model pair by its quantized feature.

    ``d_obj`` and ``dims`` default to the diameter and sorted bounding-box
    extents of ``model`` itself; ``q`` defaults to 22 angle and 40 distance
    bins over ``[0, d_obj]``.
    """
    if len(model) < 2:
        raise ValueError("a model table needs at least 2 points")
    if not model.has_normals:
        raise ValueError("model points need normals")
    if d_obj is None:
        d_obj = point_set_diameter(model.points)
    if dims is None:
        dims = bbox_dims(model.points)
    if q is None:
        q = QuantizationParams.for_diameter(d_obj)

    ii, _, feats, alpha = pair_features(model)
    keys = quantize_ppf_batch(feats, q)
    # within a bucket, order by alpha so consecutive votes rarely hit the same
    # accumulator cell (back-to-back increments of one cell serialize)
    order = np.lexsort((alpha, keys))
    counts = np.bincount(keys, minlength=q.n_keys)
    offsets = np.zeros(q.n_keys + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    return ModelTable(
        offsets=offsets,
        model_index=ii[order].astype(np.int32),
        alpha=alpha[order].astype(np.float32),
        model_cloud=model,
        d_obj=float(d_obj),
        bbox_dims=tuple(float(x) for x in dims),
        quant=q,
        spread=spreading,
    )


# --- serialization ---------------------------------------------------------

_HEADER = struct.Struct("<4sIIIddddd?")


def save_table(t: ModelTable, path) -> None:
    """Write ``t`` in the versioned little-endian PPF1 format."""
    pts = np.ascontiguousarray(t.model_cloud.points, "<f8")
    nrm = np.ascontiguousarray(t.model_cloud.normals, "<f8")
    with open(path, "wb") as fh:
        fh.write(
            _HEADER.pack(
                MAGIC,
                FORMAT_VERSION,
                t.quant.n_angle_bins,
                t.quant.n_dist_bins,
                t.quant.dist_step,
                t.d_obj,
                *t.bbox_dims,
                t.spread,
            )
        )
        fh.write(struct.pack("<Q", len(pts)))
        fh.write(pts.tobytes())
        fh.write(nrm.tobytes())
        fh.write(struct.pack("<Q", len(t.offsets)))
        fh.write(np.ascontiguousarray(t.offsets, "<i8").tobytes())
        fh.write(struct.pack("<Q", len(t.model_index)))
        fh.write(np.ascontiguousarray(t.model_index, "<i4").tobytes())
        fh.write(np.ascontiguousarray(t.alpha, "<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TableFormatError(f"truncated table: expected {n} bytes of {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype).copy()

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_table(path) -> ModelTable:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf)
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise TableVersionError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}", 0)
    head = _HEADER.unpack(r.take(_HEADER.size, "header"))
    _, version, n_ang, n_dist, dist_step, d_obj, b0, b1, b2, spread = head
    if version != FORMAT_VERSION:
        raise TableVersionError(f"unsupported table version {version}", 4)
    try:
        q = QuantizationParams(dist_step, n_ang, n_dist)
    except ValueError as exc:
        raise TableFormatError(f"invalid quantization header: {exc}", 8) from None
    n_pts = r.u64("point count")
    pts = r.array(3 * n_pts, "<f8", "model points").reshape(-1, 3)
    nrm = r.array(3 * n_pts, "<f8", "model normals").reshape(-1, 3)
    off_at = r.pos
    n_off = r.u64("offset count")
    if n_off != q.n_keys + 1:
        raise TableFormatError(f"offset count {n_off} does not match {q.n_keys + 1} buckets", off_at)
    offsets = r.array(n_off, "<i8", "bucket offsets")
    ent_at = r.pos
    n_ent = r.u64("entry count")
    if offsets[-1] != n_ent or np.any(np.diff(offsets) < 0):
        raise TableFormatError("bucket offsets inconsistent with entry count", ent_at)
    idx = r.array(n_ent, "<i4", "model indices")
    alpha = r.array(n_ent, "<f4", "alpha values")
    if r.pos != len(buf):
        raise TableFormatError("trailing bytes after table", r.pos)
    try:
        return ModelTable(
            offsets=offsets.astype(np.int64),
            model_index=idx.astype(np.int32),
            alpha=alpha.astype(np.float32),
            model_cloud=OrientedPointCloud(pts, nrm),
            d_obj=d_obj,
            bbox_dims=(b0, b1, b2),
            quant=q,
            spread=bool(spread),
        )
    except ValueError as exc:
        raise TableFormatError(str(exc), ent_at) from None
