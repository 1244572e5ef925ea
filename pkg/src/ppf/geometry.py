"""Rigid-motion helpers, the point pair feature, and pose recovery from one pair match.

Conventions used throughout the package:

* A :class:`Pose` maps model coordinates into scene (camera) coordinates,
  ``x_scene = R @ x_model + t``.
* The canonical frame of an oriented point ``(p, n)`` moves ``p`` to the origin
  and rotates ``n`` onto ``+x``.
* The pair angle ``alpha`` is the rotation about ``+x`` that brings the second
  point of a pair (expressed in the first point's canonical frame) into the
  half-plane ``{z = 0, y >= 0}``. It is always wrapped to ``[-pi, pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi

# below this the pair is treated as coincident
DEGENERATE_DIST = 1e-12
UNIT_TOL = 1e-6


class DegeneratePairError(ValueError):
    """Raised when a point pair does not define a feature or angle."""


def wrap_angle(a):
    """Wrap angle(s) to the half-open interval [-pi, pi)."""
    return (np.asarray(a, dtype=float) + math.pi) % TWO_PI - math.pi


def _wrap_scalar(a: float) -> float:
    w = (a + math.pi) % TWO_PI - math.pi
    # fmod rounding can land exactly on +pi
    return -math.pi if w >= math.pi else w


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; ``axis`` need not be normalized."""
    axis = np.asarray(axis, dtype=float)
    norm = np.linalg.norm(axis)
    if norm == 0.0 or angle == 0.0:
        return np.eye(3)
    k = skew(axis / norm)
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def rotation_vector_matrix(rvec) -> np.ndarray:
    rvec = np.asarray(rvec, dtype=float)
    return axis_angle_matrix(rvec, float(np.linalg.norm(rvec)))


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (via a random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def matrix3x4(self) -> np.ndarray:
        return self.matrix()[:3]

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def apply(self, pts) -> np.ndarray:
        """Transform a point or an (N, 3) array of points."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t

    def rotate(self, vecs) -> np.ndarray:
        return np.asarray(vecs, dtype=float) @ self.R.T

    def is_valid(self, tol: float = 1e-6) -> bool:
        R = self.R
        return bool(
            np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol
        )

    def distance_to(self, other: "Pose") -> tuple[float, float]:
        """(translation distance in m, geodesic rotation angle in rad)."""
        return (
            float(np.linalg.norm(self.t - other.t)),
            rotation_angle(self.R.T @ other.R),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.R, other.R) and np.array_equal(self.t, other.t))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class PPF:
    dist: float
    angle_n1_d: float
    angle_n2_d: float
    angle_n1_n2: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dist, self.angle_n1_d, self.angle_n2_d, self.angle_n1_n2])


def _angle(a: np.ndarray, b: np.ndarray) -> float:
    c = float(np.dot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))
    return math.acos(min(1.0, max(-1.0, c)))


def _check_unit(n: np.ndarray, name: str = "normal") -> None:
    if abs(np.linalg.norm(n) - 1.0) > UNIT_TOL:
        raise ValueError(f"{name} is not unit length (|n| = {np.linalg.norm(n):.6g})")


def compute_ppf(p1, n1, p2, n2) -> PPF:
    """Point pair feature of two oriented points.

    Returns ``[|d|, angle(n1, d), angle(n2, d), angle(n1, n2)]`` with
    ``d = p2 - p1``. Raises :class:`DegeneratePairError` for coincident points.
    """
    p1, n1, p2, n2 = (np.asarray(v, dtype=float) for v in (p1, n1, p2, n2))
    d = p2 - p1
    dist = float(np.linalg.norm(d))
    if dist <= DEGENERATE_DIST:
        raise DegeneratePairError("coincident points do not define a pair feature")
    return PPF(dist, _angle(n1, d), _angle(n2, d), _angle(n1, n2))


def compute_ppf_batch(p1, n1, p2, n2) -> np.ndarray:
    """Vectorized :func:`compute_ppf` over broadcastable (..., 3) arrays.

    Returns an (..., 4) array. Degenerate pairs produce a zero distance and
    angles of ``pi/2`` against the zero vector; callers filter them.
    """
    p1, n1, p2, n2 = (np.asarray(v, dtype=float) for v in (p1, n1, p2, n2))
    d = p2 - p1
    dist = np.linalg.norm(d, axis=-1)
    safe = np.where(dist > DEGENERATE_DIST, dist, 1.0)
    dn = d / safe[..., None]
    a1 = np.arccos(np.clip(np.sum(n1 * dn, axis=-1), -1.0, 1.0))
    a2 = np.arccos(np.clip(np.sum(n2 * dn, axis=-1), -1.0, 1.0))
    a3 = np.arccos(np.clip(np.sum(n1 * n2, axis=-1), -1.0, 1.0))
    return np.stack([dist, a1, a2, a3], axis=-1)


def canonical_rotation(n) -> np.ndarray:
    """Rotation taking the unit vector ``n`` onto ``+x``.

    The axis is ``n x x_hat``. For ``n == -x_hat`` the rotation is ``pi`` about ``z``.
    """
    n = np.asarray(n, dtype=float)
    # n x x_hat = (0, n_z, -n_y)
    axis = np.array([0.0, n[2], -n[1]])
    s = float(np.linalg.norm(axis))
    c = float(n[0])
    if s <= 1e-9:
        return np.eye(3) if c > 0 else rot_z(math.pi)
    return axis_angle_matrix(axis, math.atan2(s, c))


def canonical_frame(p, n) -> Pose:
    """Transform ``T`` with ``T(p) = 0`` and ``T.R @ n = +x``."""
    p = np.asarray(p, dtype=float)
    n = np.asarray(n, dtype=float)
    _check_unit(n)
    R = canonical_rotation(n)
    return Pose(R, -R @ p)


def canonical_rotation_batch(n: np.ndarray) -> np.ndarray:
    """Vectorized :func:`canonical_rotation` for an (N, 3) array of unit normals."""
    n = np.asarray(n, dtype=float)
    N = n.shape[0]
    out = np.empty((N, 3, 3))
    ax = np.zeros((N, 3))
    ax[:, 1] = n[:, 2]
    ax[:, 2] = -n[:, 1]
    s = np.linalg.norm(ax, axis=1)
    c = n[:, 0]
    ok = s > 1e-9
    k = np.zeros((N, 3))
    k[ok] = ax[ok] / s[ok, None]
    ang = np.arctan2(s, c)
    sin_a, cos_a = np.sin(ang), np.cos(ang)
    K = np.zeros((N, 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -k[:, 2], k[:, 1]
    K[:, 1, 0], K[:, 1, 2] = k[:, 2], -k[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -k[:, 1], k[:, 0]
    out[:] = np.eye(3) + sin_a[:, None, None] * K + (1 - cos_a)[:, None, None] * (K @ K)
    out[~ok & (c > 0)] = np.eye(3)
    out[~ok & (c <= 0)] = rot_z(math.pi)
    return out


def alpha_of_pair(frame: Pose, p2) -> float:
    """Rotation about ``+x`` bringing ``frame(p2)`` into the half-plane z=0, y>=0."""
    _, y, z = frame.apply(p2)
    if math.hypot(y, z) <= DEGENERATE_DIST:
        raise DegeneratePairError("second point lies on the first point's normal axis")
    return _wrap_scalar(-math.atan2(z, y))


def pose_from_correspondence(s_r, n_s, m_r, n_m, alpha: float) -> Pose:
    """Model-to-scene pose ``T_s^-1 * Rx(alpha) * T_m`` from one matched reference point."""
    Ts = canonical_frame(s_r, n_s)
    Tm = canonical_frame(m_r, n_m)
    return Ts.inverse() @ Pose(rot_x(alpha), np.zeros(3)) @ Tm


def poses_from_correspondences(s_pts, s_nrm, m_pts, m_nrm, alphas) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`pose_from_correspondence`. Returns (R (N,3,3), t (N,3))."""
    Rs = canonical_rotation_batch(s_nrm)
    Rm = canonical_rotation_batch(m_nrm)
    ca, sa = np.cos(alphas), np.sin(alphas)
    Rx = np.zeros((len(alphas), 3, 3))
    Rx[:, 0, 0] = 1.0
    Rx[:, 1, 1], Rx[:, 1, 2] = ca, -sa
    Rx[:, 2, 1], Rx[:, 2, 2] = sa, ca
    R = np.transpose(Rs, (0, 2, 1)) @ Rx @ Rm
    t = np.asarray(s_pts, dtype=float) - np.einsum("nij,nj->ni", R, np.asarray(m_pts, dtype=float))
    return R, t
