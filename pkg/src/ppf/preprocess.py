"""Depth ingestion, normal estimation and normal-aware subsampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial import cKDTree


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @classmethod
    def vga(cls) -> "Intrinsics":
        return cls(575.0, 575.0, 320.0, 240.0)

    def project(self, pts: np.ndarray) -> np.ndarray:
        """Pixel coordinates (u, v) of (N, 3) camera-frame points (z must be > 0)."""
        pts = np.asarray(pts, dtype=float)
        z = pts[:, 2]
        return np.stack([self.fx * pts[:, 0] / z + self.cx, self.fy * pts[:, 1] / z + self.cy], axis=1)


@dataclass
class DepthImage:
    """Row-major depth map in meters; 0 marks an invalid pixel."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("depth data must be 2-D (height, width)")
        if not np.all(np.isfinite(self.data)) or np.any(self.data < 0):
            raise ValueError("depth values must be finite and non-negative")

    @classmethod
    def empty(cls, width: int, height: int) -> "DepthImage":
        return cls(np.zeros((height, width)))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    @property
    def valid(self) -> np.ndarray:
        return self.data > 0


@dataclass
class OrientedPointCloud:
    """Points with (optional) unit normals.

    ``normals`` is None until estimated. ``pixels`` holds the (u, v) source
    pixel of each point when the cloud came from a depth image.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    pixels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("points and normals differ in length")
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
            if len(self.pixels) != len(self.points):
                raise ValueError("points and pixels differ in length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, idx) -> "OrientedPointCloud":
        return OrientedPointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.pixels is None else self.pixels[idx],
            dict(self.meta),
        )

    def transformed(self, pose) -> "OrientedPointCloud":
        return OrientedPointCloud(
            pose.apply(self.points),
            None if self.normals is None else pose.rotate(self.normals),
            None,
            dict(self.meta),
        )

    def check(self, tol: float = 1e-6) -> None:
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud contains non-finite points")
        if self.normals is not None:
            nn = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(nn - 1.0) > tol):
                raise ValueError("cloud contains non-unit normals")


def depth_to_cloud(img: DepthImage, K: Intrinsics, stride: int = 1) -> OrientedPointCloud:
    """Back-project every valid pixel (every ``stride``-th row and column).

    The result has no normals and remembers its source pixels.
    """
    d = img.data[::stride, ::stride]
    vs, us = np.nonzero(d > 0)
    z = d[vs, us]
    us = us * stride
    vs = vs * stride
    pts = np.stack([(us - K.cx) * z / K.fx, (vs - K.cy) * z / K.fy, z], axis=1)
    return OrientedPointCloud(pts, None, np.stack([us, vs], axis=1))


def estimate_normals(
    cloud: OrientedPointCloud,
    k: int = 30,
    viewpoint=(0.0, 0.0, 0.0),
    max_radius: float | None = None,
) -> OrientedPointCloud:
    """PCA normals from the k nearest neighbors, oriented toward ``viewpoint``.

    Neighbors farther than ``max_radius`` (when given) are ignored. Points with
    fewer than 3 distinct points in their neighborhood are dropped.
    """
    if k < 3:
        raise ValueError("k must be at least 3")
    n = len(cloud)
    if n == 0:
        raise EmptyCloudError("cannot estimate normals of an empty cloud")
    pts = cloud.points
    kk = min(k, n)
    tree = cKDTree(pts)
    ub = np.inf if max_radius is None else max_radius
    dist, idx = tree.query(pts, k=kk, distance_upper_bound=ub)
    dist = dist.reshape(n, kk)
    idx = idx.reshape(n, kk)
    ok_nb = np.isfinite(dist)
    idx = np.where(ok_nb, idx, 0)
    nb = pts[idx]
    w = ok_nb.astype(float)
    cnt = w.sum(axis=1)
    mean = (nb * w[..., None]).sum(axis=1) / np.maximum(cnt, 1.0)[:, None]
    c = (nb - mean[:, None, :]) * w[..., None]
    cov = np.einsum("nki,nkj->nij", c, c)
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]

    # distinct neighbor count: neighbors at nonzero distance plus the point itself
    distinct = (ok_nb & (dist > 1e-12)).sum(axis=1) + 1
    keep = distinct >= 3
    # fully degenerate (collinear) neighborhoods give no plane
    keep &= evals[:, 1] > 1e-18

    vp = np.asarray(viewpoint, dtype=float)
    flip = np.einsum("ni,ni->n", vp - pts, normals) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    out = cloud.select(keep)
    out.normals = normals[keep]
    return out


@numba.njit(cache=True)
def _greedy_subsample(pts, nrm, cell_rank, nb_rank, min_dist2, cos_keep, n_cells):
    n = pts.shape[0]
    head = np.full(n_cells, -1, np.int64)
    nxt = np.full(n, -1, np.int64)
    keep = np.zeros(n, np.bool_)
    for i in range(n):
        ok = True
        for c in range(27):
            r = nb_rank[i, c]
            if r < 0:
                continue
            j = head[r]
            while j >= 0:
                dx = pts[i, 0] - pts[j, 0]
                dy = pts[i, 1] - pts[j, 1]
                dz = pts[i, 2] - pts[j, 2]
                if dx * dx + dy * dy + dz * dz < min_dist2:
                    cs = nrm[i, 0] * nrm[j, 0] + nrm[i, 1] * nrm[j, 1] + nrm[i, 2] * nrm[j, 2]
                    if cs >= cos_keep:
                        ok = False
                        break
                j = nxt[j]
            if not ok:
                break
        if ok:
            keep[i] = True
            r = cell_rank[i]
            nxt[i] = head[r]
            head[r] = i
    return keep


_OFFSETS = np.array(
    [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64
)


def subsample_mask(
    points: np.ndarray, normals: np.ndarray, min_dist: float, normal_angle_keep: float = math.radians(30.0)
) -> np.ndarray:
    """Boolean keep-mask of the greedy normal-aware subsampling (see :func:`subsample`)."""
    if min_dist <= 0:
        raise ValueError("min_dist must be positive")
    n = len(points)
    if n == 0:
        return np.zeros(0, bool)
    cells = np.floor((points - points.min(axis=0)) / min_dist).astype(np.int64) + 1
    dims = cells.max(axis=0) + 2
    key = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    uniq, cell_rank = np.unique(key, return_inverse=True)
    nb = cells[:, None, :] + _OFFSETS[None, :, :]
    nb_key = (nb[..., 0] * dims[1] + nb[..., 1]) * dims[2] + nb[..., 2]
    pos = np.searchsorted(uniq, nb_key)
    pos_c = np.minimum(pos, len(uniq) - 1)
    nb_rank = np.where(uniq[pos_c] == nb_key, pos_c, -1)
    # angle strictly larger than the threshold keeps the point, so suppression needs cos >= cos(thr)
    cos_keep = math.cos(normal_angle_keep)
    return _greedy_subsample(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(normals, dtype=np.float64),
        cell_rank.astype(np.int64),
        nb_rank.astype(np.int64),
        min_dist * min_dist,
        cos_keep,
        len(uniq),
    )


def subsample(
    cloud: OrientedPointCloud, min_dist: float, normal_angle_keep: float = math.radians(30.0)
) -> OrientedPointCloud:
    """Greedy first-come subsampling that spares points with differing normals.

    A point is dropped only if an already kept point lies closer than
    ``min_dist`` *and* their normals differ by at most ``normal_angle_keep``.
    Input order decides which point of a close pair survives.
    """
    if cloud.normals is None:
        raise ValueError("subsampling needs normals")
    mask = subsample_mask(cloud.points, cloud.normals, min_dist, normal_angle_keep)
    return cloud.select(np.nonzero(mask)[0])


def auto_stride(img: DepthImage, K: Intrinsics, spacing: float) -> int:
    """Pixel stride whose back-projected spacing at the median depth is about ``spacing``."""
    valid = img.data[img.data > 0]
    if valid.size == 0:
        return 1
    z = float(np.median(valid))
    return max(1, int(math.floor(spacing * K.fx / z)))


def backproject_image(img: DepthImage, K: Intrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame coordinates of every pixel (zeros where invalid)."""
    h, w = img.data.shape
    v, u = np.mgrid[0:h, 0:w]
    z = img.data
    return np.stack([(u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z], axis=2)


def depth_normal_map(img: DepthImage, K: Intrinsics, radius_px: int = 2, max_jump: float = 0.02) -> np.ndarray:
    """Per-pixel unit normals (H, W, 3) facing the camera; zero where undefined.

    Coordinates are box-averaged over valid pixels in a (2r+1)^2 window, then
    differenced across +-r pixels. A normal is left undefined when a
    difference partner is invalid or its depth differs by more than
    ``max_jump`` from the center.
    """
    from scipy import ndimage

    r = int(radius_px)
    if r < 1:
        raise ValueError("radius_px must be >= 1")
    xyz = backproject_image(img, K)
    valid = img.data > 0
    size = 2 * r + 1
    wsum = ndimage.uniform_filter(valid.astype(float), size, mode="constant")
    smooth = np.stack(
        [ndimage.uniform_filter(xyz[..., i], size, mode="constant") for i in range(3)], axis=2
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        smooth = np.where(wsum[..., None] > 0, smooth / wsum[..., None], 0.0)

    h, w = valid.shape
    ok = valid.copy()
    ok[:r, :] = ok[-r:, :] = False
    ok[:, :r] = ok[:, -r:] = False
    z = img.data

    def shifted(a, dv, du):
        out = np.zeros_like(a)
        src = a[max(dv, 0) : h + min(dv, 0), max(du, 0) : w + min(du, 0)]
        out[max(-dv, 0) : h + min(-dv, 0), max(-du, 0) : w + min(-du, 0)] = src
        return out

    for dv, du in ((r, 0), (-r, 0), (0, r), (0, -r)):
        zs = shifted(z, dv, du)
        ok &= (zs > 0) & (np.abs(zs - z) <= max_jump)
    tu = shifted(smooth, 0, r) - shifted(smooth, 0, -r)
    tv = shifted(smooth, r, 0) - shifted(smooth, -r, 0)
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=2)
    ok &= norm > 0
    n = np.where(ok[..., None], n / np.where(norm > 0, norm, 1.0)[..., None], 0.0)
    # face the camera (the viewing ray to a pixel is its back-projected point)
    flip = np.einsum("hwk,hwk->hw", n, xyz) > 0
    n[flip] *= -1.0
    return n
