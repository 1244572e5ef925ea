"""File formats: PLY point clouds, 16-bit depth PNGs, intrinsics and pose JSON, datasets."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Pose
from .preprocess import DepthImage, Intrinsics, OrientedPointCloud


class PlyParseError(ValueError):
    """Malformed PLY content; ``line`` (ASCII/header) or ``offset`` (bytes) locates it."""

    def __init__(self, msg: str, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.line = line
        self.offset = offset


class UnsupportedFormatError(ValueError):
    pass


class MissingGroundTruthError(FileNotFoundError):
    pass


# --- PLY ------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, ("list", count_dtype, item_dtype))
    line: int


def _parse_header(buf: bytes):
    end = re.search(rb"end_header[ \t]*\r?\n", buf)
    if not buf.startswith(b"ply") or end is None:
        raise PlyParseError("not a PLY file: missing 'ply' magic or 'end_header'", line=1)
    lines = buf[: end.start()].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[_Element] = []
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2:
                raise PlyParseError("format line lacks a type", line=i)
            fmt = tok[1]
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise PlyParseError(f"bad element line {raw!r}", line=i)
            elements.append(_Element(tok[1], int(tok[2]), [], i))
        elif tok[0] == "property":
            if not elements:
                raise PlyParseError("property before any element", line=i)
            if len(tok) == 5 and tok[1] == "list":
                if tok[2] not in _PLY_TYPES or tok[3] not in _PLY_TYPES:
                    raise PlyParseError(f"unknown list property type in {raw!r}", line=i)
                elements[-1].props.append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise PlyParseError(f"bad property line {raw!r}", line=i)
        else:
            raise PlyParseError(f"unexpected header keyword {tok[0]!r}", line=i)
    if fmt is None:
        raise PlyParseError("header has no format line", line=2)
    # 1-based number of the first body line (the header lines plus end_header precede it)
    return fmt, elements, end.end(), len(lines) + 2


def _vertex_columns(el: _Element) -> tuple[list[int], list[int] | None]:
    names = [p[0] for p in el.props]
    try:
        xyz = [names.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise PlyParseError("vertex element lacks x, y or z", line=el.line) from None
    if all(a in names for a in ("nx", "ny", "nz")):
        return xyz, [names.index(a) for a in ("nx", "ny", "nz")]
    return xyz, None


def _cloud(table: np.ndarray, xyz, nrm) -> OrientedPointCloud:
    pts = table[:, xyz].astype(np.float64)
    normals = None
    if nrm is not None:
        normals = table[:, nrm].astype(np.float64)
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        # renormalize, as normals are usually stored in single precision
        normals = np.where(norm > 0, normals / np.where(norm > 0, norm, 1.0), normals)
    return OrientedPointCloud(pts, normals)


def load_ply(path) -> OrientedPointCloud:
    """Vertices (x, y, z and, when present, nx, ny, nz) of an ASCII or binary LE PLY.

    A cloud read without normals has ``normals`` set to None. Other elements
    (faces, ...) are skipped.
    """
    buf = Path(path).read_bytes()
    fmt, elements, body, body_line = _parse_header(buf)
    if fmt not in ("ascii", "binary_little_endian"):
        raise UnsupportedFormatError(f"unsupported PLY format {fmt!r}")
    vi = next((i for i, e in enumerate(elements) if e.name == "vertex"), None)
    if vi is None:
        raise PlyParseError("no vertex element in header")
    el = elements[vi]
    if any(isinstance(p[1], tuple) for p in el.props):
        raise UnsupportedFormatError("list properties on vertices are not supported")
    xyz, nrm = _vertex_columns(el)

    if fmt == "ascii":
        text = buf[body:].decode("ascii", errors="replace").splitlines()
        skip = sum(e.count for e in elements[:vi])
        rows = text[skip : skip + el.count]
        if len(rows) < el.count:
            raise PlyParseError(f"expected {el.count} vertex lines, found {len(rows)}", line=body_line + skip + len(rows))
        table = np.empty((el.count, len(el.props)))
        for k, row in enumerate(rows):
            tok = row.split()
            if len(tok) < len(el.props):
                raise PlyParseError(f"vertex has {len(tok)} values, expected {len(el.props)}", line=body_line + skip + k)
            try:
                table[k] = [float(v) for v in tok[: len(el.props)]]
            except ValueError:
                raise PlyParseError(f"non-numeric vertex value in {row!r}", line=body_line + skip + k) from None
        return _cloud(table, xyz, nrm)

    pos = body
    for e in elements[:vi]:
        if any(isinstance(p[1], tuple) for p in e.props):
            raise UnsupportedFormatError(f"binary element {e.name!r} with list properties precedes the vertices")
        pos += e.count * np.dtype([(p[0], "<" + p[1]) for p in e.props]).itemsize
    dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
    need = el.count * dt.itemsize
    if pos + need > len(buf):
        raise PlyParseError(f"truncated vertex data: need {need} bytes", offset=pos)
    rec = np.frombuffer(buf, dtype=dt, count=el.count, offset=pos)
    table = np.stack([rec[p[0]].astype(np.float64) for p in el.props], axis=1) if el.count else np.zeros((0, len(el.props)))
    return _cloud(table, xyz, nrm)


def save_ply(cloud: OrientedPointCloud, path, binary: bool = False) -> None:
    cols = ["x", "y", "z"]
    data = [cloud.points]
    if cloud.normals is not None:
        cols += ["nx", "ny", "nz"]
        data.append(cloud.normals)
    table = np.hstack(data) if data else np.zeros((0, 3))
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0", f"element vertex {len(cloud)}"]
    header += [f"property double {c}" for c in cols]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(table, "<f8").tobytes())
        else:
            for row in table:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


# --- depth images, intrinsics, poses ---------------------------------------------


def load_depth_png(path, depth_scale: float = 0.001) -> DepthImage:
    """16-bit PNG depth; raw values times ``depth_scale`` give meters (0 stays invalid)."""
    with Image.open(path) as im:
        raw = np.asarray(im)
    if raw.ndim != 2:
        raise UnsupportedFormatError(f"depth PNG must be single-channel, got shape {raw.shape}")
    return DepthImage(raw.astype(np.float64) * depth_scale)


def save_depth_png(img: DepthImage, path, depth_scale: float = 0.001) -> None:
    raw = np.rint(img.data / depth_scale)
    if raw.max(initial=0) > 65535:
        raise ValueError("depth exceeds the 16-bit range at this scale")
    Image.fromarray(raw.astype(np.uint16)).save(path)


def load_intrinsics(path) -> tuple[Intrinsics, dict]:
    """Intrinsics from JSON with fx, fy, cx, cy (or a 3x3 ``K``); returns the extra keys too."""
    d = json.loads(Path(path).read_text())
    if "K" in d:
        K = np.asarray(d["K"], dtype=float).reshape(3, 3)
        k = Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2])
    else:
        try:
            k = Intrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))
        except KeyError as exc:
            raise ValueError(f"intrinsics JSON lacks {exc.args[0]!r}") from None
    extra = {a: b for a, b in d.items() if a not in ("fx", "fy", "cx", "cy", "K")}
    return k, extra


def save_intrinsics(K: Intrinsics, path, **extra) -> None:
    d = {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy}
    d.update(extra)
    Path(path).write_text(json.dumps(d, indent=2))


def pose_to_json(pose: Pose) -> list:
    """Row-major 3x4 matrix [R | t] as nested lists."""
    return pose.matrix3x4().tolist()


def pose_from_json(m) -> Pose:
    a = np.asarray(m, dtype=float)
    if a.shape == (12,):
        a = a.reshape(3, 4)
    if a.shape == (4, 4):
        a = a[:3]
    if a.shape != (3, 4):
        raise ValueError(f"pose must be a 3x4 matrix, got shape {a.shape}")
    pose = Pose(a[:, :3], a[:, 3])
    return pose


@dataclass
class GroundTruthPose:
    object_id: str
    pose: Pose
    frame_id: str

    def to_dict(self) -> dict:
        return {"object_id": self.object_id, "frame_id": self.frame_id, "pose": pose_to_json(self.pose)}

    @classmethod
    def from_dict(cls, d: dict, object_id: str = "", frame_id: str = "") -> "GroundTruthPose":
        return cls(str(d.get("object_id", object_id)), pose_from_json(d["pose"]), str(d.get("frame_id", frame_id)))


def save_ground_truth(gt: GroundTruthPose, path) -> None:
    Path(path).write_text(json.dumps(gt.to_dict(), indent=2))


def load_ground_truth(path, object_id: str = "", frame_id: str = "") -> GroundTruthPose:
    d = json.loads(Path(path).read_text())
    if isinstance(d, list):
        d = {"pose": d}
    return GroundTruthPose.from_dict(d, object_id, frame_id)


# --- dataset layout ---------------------------------------------------------------
#
#   <object>/model.ply
#   <object>/intrinsics.json          fx, fy, cx, cy and optional depth_scale
#   <object>/frames/NNNN.depth.png
#   <object>/frames/NNNN.gt.json


@dataclass
class Frame:
    frame_id: str
    depth: DepthImage
    gt: GroundTruthPose | None


@dataclass
class Dataset:
    root: Path
    object_id: str
    K: Intrinsics
    depth_scale: float
    frame_ids: list[str]

    @property
    def model_path(self) -> Path:
        return self.root / "model.ply"

    def load_model(self) -> OrientedPointCloud:
        return load_ply(self.model_path)

    def frame(self, frame_id: str, require_gt: bool = True) -> Frame:
        fdir = self.root / "frames"
        depth = load_depth_png(fdir / f"{frame_id}.depth.png", self.depth_scale)
        gt_path = fdir / f"{frame_id}.gt.json"
        if not gt_path.exists():
            if require_gt:
                raise MissingGroundTruthError(f"no ground truth for frame {frame_id} ({gt_path})")
            return Frame(frame_id, depth, None)
        return Frame(frame_id, depth, load_ground_truth(gt_path, self.object_id, frame_id))

    def __len__(self) -> int:
        return len(self.frame_ids)

    def __iter__(self):
        return (self.frame(f) for f in self.frame_ids)


def open_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "intrinsics.json").exists():
        raise FileNotFoundError(f"{root} has no intrinsics.json")
    K, extra = load_intrinsics(root / "intrinsics.json")
    fdir = root / "frames"
    ids = sorted(p.name[: -len(".depth.png")] for p in fdir.glob("*.depth.png")) if fdir.is_dir() else []
    return Dataset(root, extra.get("object_id", root.name), K, float(extra.get("depth_scale", 0.001)), ids)


def write_frame(root, frame_id: str, depth: DepthImage, gt: Pose | None, object_id: str = "", depth_scale: float = 0.001) -> None:
    fdir = Path(root) / "frames"
    os.makedirs(fdir, exist_ok=True)
    save_depth_png(depth, fdir / f"{frame_id}.depth.png", depth_scale)
    if gt is not None:
        save_ground_truth(GroundTruthPose(object_id, gt, frame_id), fdir / f"{frame_id}.gt.json")
