"""Synthetic test objects and seeded depth scenes.

Objects are tiny constructive solids: a union of boxes and cylinders minus
other boxes and cylinders. Surfaces are sampled on regular grids with exact
outward normals, which gives noise-free models and scene renderings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Pose, random_rotation
from .preprocess import DepthImage, Intrinsics, OrientedPointCloud
from .verify import splat_points

EPS = 1e-9


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def inside(self, p: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((p > lo + EPS) & (p < hi - EPS), axis=1)

    def sample(self, spacing: float):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        pts, nrm = [], []
        for axis in range(3):
            u, v = [a for a in range(3) if a != axis]
            gu = _grid(lo[u], hi[u], spacing)
            gv = _grid(lo[v], hi[v], spacing)
            U, V = np.meshgrid(gu, gv, indexing="ij")
            for side, val in ((-1.0, lo[axis]), (1.0, hi[axis])):
                p = np.zeros((U.size, 3))
                p[:, u], p[:, v], p[:, axis] = U.ravel(), V.ravel(), val
                n = np.zeros_like(p)
                n[:, axis] = side
                pts.append(p)
                nrm.append(n)
        return np.concatenate(pts), np.concatenate(nrm)


@dataclass(frozen=True)
class Cylinder:
    """Solid cylinder along z with its axis through (cx, cy)."""

    radius: float
    z0: float
    z1: float
    cx: float = 0.0
    cy: float = 0.0

    def inside(self, p: np.ndarray) -> np.ndarray:
        r = np.hypot(p[:, 0] - self.cx, p[:, 1] - self.cy)
        return (r < self.radius - EPS) & (p[:, 2] > self.z0 + EPS) & (p[:, 2] < self.z1 - EPS)

    def sample(self, spacing: float):
        n_ang = max(8, int(math.ceil(2 * math.pi * self.radius / spacing)))
        th = np.arange(n_ang) * 2 * math.pi / n_ang
        zs = _grid(self.z0, self.z1, spacing)
        T, Z = np.meshgrid(th, zs, indexing="ij")
        side = np.stack([self.cx + self.radius * np.cos(T.ravel()), self.cy + self.radius * np.sin(T.ravel()), Z.ravel()], 1)
        side_n = np.stack([np.cos(T.ravel()), np.sin(T.ravel()), np.zeros(T.size)], 1)
        cap_p, cap_n = [np.array([[self.cx, self.cy, 0.0]])], []
        for k in range(1, int(math.ceil(self.radius / spacing)) + 1):
            rr = min(k * spacing, self.radius)
            m = max(6, int(math.ceil(2 * math.pi * rr / spacing)))
            a = np.arange(m) * 2 * math.pi / m + 0.5 * k
            cap_p.append(np.stack([self.cx + rr * np.cos(a), self.cy + rr * np.sin(a), np.zeros(m)], 1))
        disk = np.concatenate(cap_p)
        pts, nrm = [side], [side_n]
        for z, s in ((self.z0, -1.0), (self.z1, 1.0)):
            d = disk.copy()
            d[:, 2] = z
            pts.append(d)
            nrm.append(np.tile([0.0, 0.0, s], (len(d), 1)))
        return np.concatenate(pts), np.concatenate(nrm)


def _grid(a: float, b: float, spacing: float) -> np.ndarray:
    n = max(1, int(math.ceil((b - a) / spacing)))
    return a + (np.arange(n + 1) / n) * (b - a)


@dataclass(frozen=True)
class Solid:
    name: str
    add: tuple
    sub: tuple = ()

    def inside(self, p: np.ndarray) -> np.ndarray:
        pos = np.zeros(len(p), bool)
        for prim in self.add:
            pos |= prim.inside(p)
        for prim in self.sub:
            pos &= ~prim.inside(p)
        return pos

    def sample_surface(self, spacing: float) -> OrientedPointCloud:
        pts, nrm = [], []
        for i, prim in enumerate(self.add):
            p, n = prim.sample(spacing)
            keep = np.ones(len(p), bool)
            for j, other in enumerate(self.add):
                if j != i:
                    keep &= ~other.inside(p)
            for other in self.sub:
                keep &= ~other.inside(p)
            pts.append(p[keep])
            nrm.append(n[keep])
        for i, prim in enumerate(self.sub):
            p, n = prim.sample(spacing)
            keep = np.zeros(len(p), bool)
            for other in self.add:
                keep |= other.inside(p)
            for j, other in enumerate(self.sub):
                if j != i:
                    keep &= ~other.inside(p)
            pts.append(p[keep])
            nrm.append(-n[keep])
        p = np.concatenate(pts)
        n = np.concatenate(nrm)
        # drop exact duplicates along shared edges
        _, first = np.unique(np.round(p / (spacing * 1e-3)).astype(np.int64), axis=0, return_index=True)
        first.sort()
        return OrientedPointCloud(p[first], n[first], meta={"name": self.name, "spacing": spacing})


def _box(sx, sy, sz, center=(0.0, 0.0, 0.0)) -> Box:
    c = np.asarray(center, float)
    h = np.array([sx, sy, sz]) / 2
    return Box(tuple(c - h), tuple(c + h))


def notched_box() -> Solid:
    """12 x 5 x 4 cm box with blocks cut from two opposite corners.

    The two notches differ in size and sit on opposite corners, so every
    view shows at least part of one and no half-turn maps the box onto itself.
    """
    body = _box(0.12, 0.05, 0.04)
    notch = Box((0.02, 0.0, 0.0), (0.07, 0.035, 0.03))
    notch_b = Box((-0.07, -0.035, -0.03), (-0.04, -0.01, -0.005))
    return Solid("box", (body,), (notch, notch_b))


def finned_cylinder() -> Solid:
    """Closed cylinder (r 3 cm, 8 cm long) with two 1.6 cm thick radial fins.

    The fins sit on opposite halves of the length and 90 degrees apart, so
    at least one shows in the silhouette from any side view.
    """
    body = Cylinder(0.03, -0.04, 0.04)
    fin = Box((0.025, -0.008, -0.04), (0.075, 0.008, 0.0))
    fin_b = Box((-0.008, 0.025, 0.01), (0.008, 0.06, 0.04))
    return Solid("cylinder", (body, fin, fin_b))


def l_bracket() -> Solid:
    """L-bracket with unequal legs (10 cm and 6 cm), 5 cm wide, 8 mm thick.

    An off-center gusset sits inside the bend and a lip hangs under the end
    of the long leg, so the back of the bracket is not featureless.
    """
    leg_a = Box((0.0, 0.0, 0.0), (0.10, 0.05, 0.008))
    leg_b = Box((0.0, 0.0, 0.0), (0.008, 0.05, 0.06))
    gusset = Box((0.008, 0.01, 0.008), (0.03, 0.025, 0.03))
    lip = Box((0.085, 0.0, -0.015), (0.10, 0.03, 0.0))
    return Solid("bracket", (leg_a, leg_b, gusset, lip))


def elongated_box() -> Solid:
    """3 x 4 x 20 cm bar with a step cut at one end."""
    body = _box(0.03, 0.04, 0.20)
    step = Box((0.0, -0.03, 0.06), (0.03, 0.03, 0.11))
    return Solid("bar", (body,), (step,))


MODELS = {
    "box": notched_box,
    "cylinder": finned_cylinder,
    "bracket": l_bracket,
    "bar": elongated_box,
}


def make_model(name: str, spacing: float = 0.0015) -> OrientedPointCloud:
    """Dense surface samples of a named synthetic object, centered on its bounding box."""
    try:
        solid = MODELS[name]()
    except KeyError:
        raise ValueError(f"unknown synthetic model {name!r}; choose from {sorted(MODELS)}") from None
    cloud = solid.sample_surface(spacing)
    c = 0.5 * (cloud.points.min(axis=0) + cloud.points.max(axis=0))
    cloud.points = cloud.points - c
    return cloud


# --- scenes -------------------------------------------------------------------


@dataclass
class SynthConfig:
    seed: int = 0
    model: str = "box"
    z_range: tuple[float, float] = (0.5, 1.5)
    # fraction of the half-image the object center may move off the principal point
    lateral: float = 0.5
    plane: bool = True
    plane_size: float = 1.5  # patch side length, in object diameters
    plane_tilt_deg: float = 30.0
    clutter_fraction: float = 0.0  # target share of valid pixels that are clutter
    clutter_max_blobs: int = 30
    noise_sigma: float = 0.0
    occluder_fraction: float = 0.0
    view: str = "random"  # or "end_on": longest model axis roughly along the viewing ray
    end_on_tilt_deg: float = 35.0
    width: int = 640
    height: int = 480
    fx: float = 575.0
    fy: float = 575.0
    cx: float = 320.0
    cy: float = 240.0
    render_spacing: float = 0.0015

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "z_range" in known:
            known["z_range"] = tuple(known["z_range"])
        return cls(**known)


@dataclass
class SynthScene:
    depth: DepthImage
    K: Intrinsics
    gt: Pose
    model_name: str
    object_mask: np.ndarray
    info: dict = field(default_factory=dict)


def _sphere_points(center, radius, spacing):
    n = max(50, int(4 * math.pi * radius * radius / (spacing * spacing)))
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    th = math.pi * (1 + 5**0.5) * i
    d = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], 1)
    return center + radius * d, d


def _render_plane(K, size, point, normal, u_axis, v_axis, half):
    w, h = size
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    rays = np.stack([(us - K.cx) / K.fx, (vs - K.cy) / K.fy, np.ones_like(us, float)], -1)
    den = rays @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (point @ normal) / den
    X = rays * z[..., None] - point
    inside = (np.abs(X @ u_axis) <= half) & (np.abs(X @ v_axis) <= half) & (z > 0) & np.isfinite(z)
    return np.where(inside, z, np.inf)


def object_pose(cfg: SynthConfig, rng: np.random.Generator, model: OrientedPointCloud) -> Pose:
    z = rng.uniform(*cfg.z_range)
    u = cfg.cx + rng.uniform(-1, 1) * cfg.lateral * cfg.cx
    v = cfg.cy + rng.uniform(-1, 1) * cfg.lateral * cfg.cy
    t = np.array([(u - cfg.cx) * z / cfg.fx, (v - cfg.cy) * z / cfg.fy, z])
    if cfg.view == "end_on":
        # longest model axis toward the camera, tilted by up to end_on_tilt_deg
        ext = np.ptp(model.points, axis=0)
        long_axis = np.zeros(3)
        long_axis[int(np.argmax(ext))] = 1.0
        view_dir = -t / np.linalg.norm(t)
        tilt = math.radians(rng.uniform(0, cfg.end_on_tilt_deg))
        perp = np.cross(view_dir, rng.normal(size=3))
        perp /= np.linalg.norm(perp)
        target = math.cos(tilt) * view_dir + math.sin(tilt) * perp
        if rng.uniform() < 0.5:
            target = -target
        R0 = _align(long_axis, target)
        spin = _axis_angle(target, rng.uniform(0, 2 * math.pi))
        return Pose(spin @ R0, t)
    return Pose(random_rotation(rng), t)


def _axis_angle(axis, ang):
    from .geometry import axis_angle_matrix

    return axis_angle_matrix(axis, ang)


def _align(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    s, c = np.linalg.norm(v), float(a @ b)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.cross(a, [1.0, 0, 0] if abs(a[0]) < 0.9 else [0, 1.0, 0])
        return _axis_angle(perp, math.pi)
    return _axis_angle(v, math.atan2(s, c))


def synth_scene(cfg: SynthConfig, model: OrientedPointCloud | None = None) -> SynthScene:
    """Render one seeded scene: posed object, optional plane, clutter, noise, occluder."""
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = make_model(cfg.model, cfg.render_spacing)
    K = cfg.intrinsics
    size = (cfg.width, cfg.height)
    from .model_table import point_set_diameter

    d_obj = point_set_diameter(model.points)
    gt = object_pose(cfg, rng, model)
    obj_pts = gt.apply(model.points)
    obj_nrm = gt.rotate(model.normals)
    radius = 0.75 * cfg.render_spacing
    obj_z = splat_points(obj_pts, obj_nrm, radius, K, size)
    obj_mask = np.isfinite(obj_z)
    zbuf = obj_z.copy()
    info = {"d_obj": d_obj, "object_pixels": int(obj_mask.sum())}

    if cfg.plane:
        # plane behind the object, facing the camera up to plane_tilt_deg off-axis
        view_dir = gt.t / np.linalg.norm(gt.t)
        tilt = math.radians(rng.uniform(0, cfg.plane_tilt_deg))
        perp = np.cross(view_dir, rng.normal(size=3))
        perp /= np.linalg.norm(perp)
        n_p = -(math.cos(tilt) * view_dir + math.sin(tilt) * perp)  # toward the camera
        back = float(np.min(obj_pts @ n_p))
        point = gt.t + (back - float(gt.t @ n_p)) * n_p
        u_ax = np.cross(n_p, [0.0, 1.0, 0.0])
        u_ax /= np.linalg.norm(u_ax)
        v_ax = np.cross(n_p, u_ax)
        zp = _render_plane(K, size, point, n_p, u_ax, v_ax, 0.5 * cfg.plane_size * d_obj)
        zbuf = np.minimum(zbuf, zp)
        info["plane_pixels"] = int(np.isfinite(zp).sum())

    clutter = np.zeros(zbuf.shape, bool)
    if cfg.clutter_fraction > 0:
        for _ in range(cfg.clutter_max_blobs):
            valid = np.isfinite(zbuf)
            if clutter.sum() >= cfg.clutter_fraction * max(valid.sum(), 1):
                break
            c_pts, c_nrm = _clutter_blob(rng, gt, d_obj, cfg.render_spacing)
            cz = splat_points(c_pts, c_nrm, radius, K, size)
            closer = cz < zbuf
            zbuf = np.where(closer, cz, zbuf)
            clutter = (clutter | closer) & np.isfinite(zbuf)
            clutter &= ~(np.isclose(zbuf, obj_z) & obj_mask)
        info["clutter_pixels"] = int(clutter.sum())

    if cfg.occluder_fraction > 0:
        zbuf = _occlude(zbuf, obj_z, obj_mask, cfg.occluder_fraction, rng)

    visible_obj = obj_mask & np.isclose(zbuf, obj_z)
    depth = np.where(np.isfinite(zbuf), zbuf, 0.0)
    if cfg.noise_sigma > 0:
        valid = depth > 0
        depth = np.where(valid, depth + rng.normal(0.0, cfg.noise_sigma, depth.shape), 0.0)
        depth = np.maximum(depth, 0.0)
    info["visible_object_pixels"] = int(visible_obj.sum())
    info["valid_pixels"] = int((depth > 0).sum())
    return SynthScene(DepthImage(depth), K, gt, model.meta.get("name", cfg.model), visible_obj, info)


def _clutter_blob(rng, gt: Pose, d_obj: float, spacing: float):
    # a sphere or a box next to the object
    direction = rng.normal(size=3)
    direction[2] *= 0.3
    direction /= np.linalg.norm(direction)
    center = gt.t + direction * d_obj * rng.uniform(0.6, 1.2)
    if rng.uniform() < 0.5:
        r = d_obj * rng.uniform(0.1, 0.3)
        return _sphere_points(center, r, spacing)
    s = d_obj * rng.uniform(0.15, 0.5, size=3)
    box = Box(tuple(-s / 2), tuple(s / 2))
    p, n = box.sample(spacing)
    R = random_rotation(rng)
    return p @ R.T + center, n @ R.T


def _occlude(zbuf, obj_z, obj_mask, fraction, rng):
    """Cover a contiguous share of the object's pixels with a flat occluder in front."""
    vs, us = np.nonzero(obj_mask)
    if len(vs) == 0:
        return zbuf
    ang = rng.uniform(0, 2 * math.pi)
    proj = us * math.cos(ang) + vs * math.sin(ang)
    cut = np.quantile(proj, fraction)
    H, W = zbuf.shape
    V, U = np.mgrid[0:H, 0:W]
    region = (U * math.cos(ang) + V * math.sin(ang)) <= cut
    pad = 10
    region &= (U >= us.min() - pad) & (U <= us.max() + pad) & (V >= vs.min() - pad) & (V <= vs.max() + pad)
    occ_depth = float(obj_z[obj_mask].min()) - 0.05
    out = zbuf.copy()
    out[region] = np.minimum(out[region], occ_depth)
    return out
