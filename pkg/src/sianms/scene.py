"""Core domain types, frame transforms and scene-file serialization.

Conventions used throughout the package:

* The global frame is the rig (ego) frame of the current timestamp: x forward,
  y left, z up, angles counter-clockwise in radians.
* A camera's optical axis is its local +x axis in bird's eye view.  The image
  column ``u`` grows with the counter-clockwise bearing of the ray:
  ``u = cx + fx * tan(bearing)``.  Rows ``v`` grow downwards.
* Box sizes are ``(w, l, h)``; the length ``l`` lies along the heading ``yaw``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .exceptions import SceneFormatError, ValidationError

FORMAT_VERSION = 1

CAR, PEDESTRIAN, CYCLIST = 0, 1, 2
CLASS_NAMES = {CAR: "car", PEDESTRIAN: "pedestrian", CYCLIST: "cyclist"}

TWO_PI = 2.0 * math.pi


def normalize_angle(angle: float) -> float:
    """Wrap ``angle`` to (-pi, pi]."""
    r = math.remainder(angle, TWO_PI)
    if r <= -math.pi:
        r += TWO_PI
    return r


def normalize_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_angle`."""
    r = np.remainder(np.asarray(angles, dtype=float) + math.pi, TWO_PI) - math.pi
    return np.where(r <= -math.pi, r + TWO_PI, r)


def _frozen_array(values, shape_tail: tuple[int, ...] = ()) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape_tail and (arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail):
        if arr.size == 0:
            arr = arr.reshape((0,) + shape_tail)
        else:
            raise ValidationError(f"expected array of shape (n, {shape_tail}), got {arr.shape}")
    arr.flags.writeable = False
    return arr


def _arrays_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True)
class Camera:
    id: int
    fx: float
    fy: float
    cx: float
    cy: float
    width: float
    height: float
    pos: tuple[float, float] = (0.0, 0.0)
    z: float = 0.0
    yaw: float = 0.0
    hfov: float | None = None

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"camera {self.id}: focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValidationError(f"camera {self.id}: image size must be positive")
        object.__setattr__(self, "pos", (float(self.pos[0]), float(self.pos[1])))
        derived = 2.0 * math.atan(self.width / (2.0 * self.fx))
        if self.hfov is None:
            object.__setattr__(self, "hfov", derived)
        elif abs(self.hfov - derived) > 1e-9:
            raise ValidationError(
                f"camera {self.id}: hfov {self.hfov!r} inconsistent with fx/width ({derived!r})"
            )
        if not 0.0 < self.hfov < math.pi:
            raise ValidationError(f"camera {self.id}: hfov must lie in (0, pi)")

    @classmethod
    def from_hfov(cls, id: int, hfov: float, width: float = 1600.0, height: float = 900.0,
                  pos=(0.0, 0.0), z: float = 0.0, yaw: float = 0.0) -> "Camera":
        """Square-pixel camera with centred principal point."""
        f = width / (2.0 * math.tan(hfov / 2.0))
        return cls(id=id, fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, width=width,
                   height=height, pos=pos, z=z, yaw=normalize_angle(yaw))

    @property
    def coverage(self) -> tuple[float, float]:
        """Global bearing interval seen by the camera, lower bound normalised."""
        lo = normalize_angle(self.yaw - self.hfov / 2.0)
        return lo, lo + self.hfov


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]
    adjacency: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        cams = tuple(self.cameras)
        object.__setattr__(self, "cameras", cams)
        ids = [c.id for c in cams]
        if len(set(ids)) != len(ids):
            raise ValidationError("camera ids must be unique")
        if self.adjacency is None:
            n = len(cams)
            adj = tuple((ids[k], ids[(k + 1) % n]) for k in range(n)) if n > 1 else ()
            if n == 2:
                adj = adj[:1]
        else:
            adj = tuple((int(a), int(b)) for a, b in self.adjacency)
        object.__setattr__(self, "adjacency", adj)
        from .geometry import intervals_intersect  # circular import at module load

        for a, b in adj:
            if a not in ids or b not in ids:
                raise ValidationError(f"adjacency ({a}, {b}) references an unknown camera")
            if not intervals_intersect(self.camera(a).coverage, self.camera(b).coverage):
                raise ValidationError(f"adjacent cameras {a} and {b} have no overlapping coverage")

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(c.id for c in self.cameras)

    def camera(self, camera_id: int) -> Camera:
        for cam in self.cameras:
            if cam.id == camera_id:
                return cam
        raise ValidationError(f"unknown camera id {camera_id}")

    def is_adjacent(self, a: int, b: int) -> bool:
        return (a, b) in self.adjacency or (b, a) in self.adjacency

    @property
    def origin(self) -> tuple[float, float]:
        xy = np.array([c.pos for c in self.cameras], dtype=float)
        return float(xy[:, 0].mean()), float(xy[:, 1].mean())


@dataclass(frozen=True, eq=False)
class Detection2D:
    camera_id: int
    bbox: tuple[float, float, float, float]
    score: float
    class_id: int = CAR
    embedding: np.ndarray | None = None
    truncated_left: bool = False
    truncated_right: bool = False
    # simulator annotation; never read by the suppression pipeline
    instance_id: int | None = None

    def __post_init__(self):
        bbox = tuple(float(b) for b in self.bbox)
        if len(bbox) != 4:
            raise ValidationError("bbox must have four entries")
        object.__setattr__(self, "bbox", bbox)
        u0, v0, u1, v1 = bbox
        if not (u0 < u1 and v0 < v1):
            raise ValidationError(f"degenerate bbox {bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.embedding is not None:
            emb = _frozen_array(self.embedding)
            if emb.ndim != 1 or not np.all(np.isfinite(emb)):
                raise ValidationError("embedding must be a finite 1-D vector")
            object.__setattr__(self, "embedding", emb)

    @property
    def center_u(self) -> float:
        return 0.5 * (self.bbox[0] + self.bbox[2])

    def __eq__(self, other):
        if not isinstance(other, Detection2D):
            return NotImplemented
        return (
            self.camera_id == other.camera_id and self.bbox == other.bbox
            and self.score == other.score and self.class_id == other.class_id
            and _arrays_equal(self.embedding, other.embedding)
            and self.truncated_left == other.truncated_left
            and self.truncated_right == other.truncated_right
            and self.instance_id == other.instance_id
        )


@dataclass(frozen=True)
class Box3D:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float = 0.0
    score: float = 1.0
    class_id: int = CAR

    def __post_init__(self):
        center = tuple(float(c) for c in self.center)
        size = tuple(float(s) for s in self.size)
        if len(center) != 3 or len(size) != 3:
            raise ValidationError("center and size need three components")
        if not all(s > 0 for s in size):
            raise ValidationError(f"box size must be positive, got {size}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def xy(self) -> np.ndarray:
        return np.array(self.center[:2])

    def footprint(self) -> np.ndarray:
        """BEV corners (4, 2), counter-clockwise."""
        w, l, _ = self.size
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]]) / 2.0
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.xy

    def replace(self, **changes) -> "Box3D":
        fields = dict(center=self.center, size=self.size, yaw=self.yaw,
                      score=self.score, class_id=self.class_id)
        fields.update(changes)
        return Box3D(**fields)


@dataclass(frozen=True)
class GroundTruthObject:
    instance_id: int
    box: Box3D
    visible_in: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "visible_in", tuple(int(c) for c in self.visible_in))
        if not self.visible_in:
            raise ValidationError(f"instance {self.instance_id}: visible_in is empty")


@dataclass(frozen=True, eq=False)
class Frame:
    frame_id: int
    detections: Mapping[int, tuple[Detection2D, ...]]
    lidar: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    ground_truth: tuple[GroundTruthObject, ...] = ()

    def __post_init__(self):
        dets = {int(k): tuple(v) for k, v in sorted(self.detections.items())}
        for cam_id, lst in dets.items():
            for det in lst:
                if det.camera_id != cam_id:
                    raise ValidationError(
                        f"frame {self.frame_id}: detection of camera {det.camera_id} "
                        f"filed under camera {cam_id}")
        object.__setattr__(self, "detections", dets)
        object.__setattr__(self, "lidar", _frozen_array(self.lidar, (3,)))
        gts = tuple(self.ground_truth)
        ids = [g.instance_id for g in gts]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"frame {self.frame_id}: duplicate instance ids")
        object.__setattr__(self, "ground_truth", gts)

    def all_detections(self) -> list[Detection2D]:
        return [d for cam in sorted(self.detections) for d in self.detections[cam]]

    def validate_against(self, rig: CameraRig) -> None:
        ids = set(rig.ids)
        for cam_id, lst in self.detections.items():
            if cam_id not in ids:
                raise ValidationError(
                    f"frame {self.frame_id}: camera_id {cam_id} not in rig {sorted(ids)}")
            for det in lst:
                cam = rig.camera(cam_id)
                u0, v0, u1, v1 = det.bbox
                if u0 < 0 or v0 < 0 or u1 > cam.width or v1 > cam.height:
                    raise ValidationError(
                        f"frame {self.frame_id}: bbox {det.bbox} outside camera {cam_id} image")
        for gt in self.ground_truth:
            bad = set(gt.visible_in) - ids
            if bad:
                raise ValidationError(
                    f"frame {self.frame_id}: instance {gt.instance_id} visible in unknown "
                    f"camera(s) {sorted(bad)}")

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.detections == other.detections
                and _arrays_equal(self.lidar, other.lidar)
                and self.ground_truth == other.ground_truth)


@dataclass(frozen=True)
class Scene:
    rig: CameraRig
    frames: tuple[Frame, ...]
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValidationError("a scene needs at least one frame")
        for fr in frames:
            fr.validate_against(self.rig)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "meta", dict(self.meta))


# --------------------------------------------------------------------------- transforms

def _rot2(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def points_to_global(cam: Camera, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty_like(pts)
    out[:, :2] = pts[:, :2] @ _rot2(cam.yaw).T + np.asarray(cam.pos)
    out[:, 2] = pts[:, 2] + cam.z
    return out


def points_to_camera(cam: Camera, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.empty_like(pts)
    out[:, :2] = (pts[:, :2] - np.asarray(cam.pos)) @ _rot2(cam.yaw)
    out[:, 2] = pts[:, 2] - cam.z
    return out


def camera_to_global(cam: Camera, box_local: Box3D) -> Box3D:
    """Express a box given in ``cam``'s frame in the global frame."""
    center = points_to_global(cam, np.asarray(box_local.center))[0]
    return box_local.replace(center=tuple(center), yaw=box_local.yaw + cam.yaw)


def global_to_camera(cam: Camera, box_global: Box3D) -> Box3D:
    center = points_to_camera(cam, np.asarray(box_global.center))[0]
    return box_global.replace(center=tuple(center), yaw=box_global.yaw - cam.yaw)


# --------------------------------------------------------------------------- serialization

def camera_to_dict(cam: Camera) -> dict:
    return {"id": cam.id, "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "pos": list(cam.pos), "z": cam.z,
            "yaw": cam.yaw, "hfov": cam.hfov}


def box_to_dict(box: Box3D) -> dict:
    return {"center": list(box.center), "size": list(box.size), "yaw": box.yaw,
            "score": box.score, "class_id": box.class_id}


def detection_to_dict(det: Detection2D) -> dict:
    out = {"camera_id": det.camera_id, "bbox": list(det.bbox), "score": det.score,
           "class_id": det.class_id,
           "embedding": None if det.embedding is None else det.embedding.tolist(),
           "truncated_left": det.truncated_left, "truncated_right": det.truncated_right}
    if det.instance_id is not None:
        out["instance_id"] = det.instance_id
    return out


def frame_to_dict(frame: Frame) -> dict:
    return {
        "frame_id": frame.frame_id,
        "detections": {str(k): [detection_to_dict(d) for d in v]
                       for k, v in frame.detections.items()},
        "lidar": frame.lidar.tolist(),
        "ground_truth": [{"instance_id": g.instance_id, "box": box_to_dict(g.box),
                          "visible_in": list(g.visible_in)} for g in frame.ground_truth],
    }


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "scene",
        "rig": {"cameras": [camera_to_dict(c) for c in scene.rig.cameras],
                "adjacency": [list(p) for p in scene.rig.adjacency]},
        "frames": [frame_to_dict(f) for f in scene.frames],
        "meta": scene.meta,
    }


class _Reader:
    """Field access with a path for error messages."""

    def __init__(self, path: str = "$"):
        self.path = path

    def fail(self, where: str, msg: str):
        raise SceneFormatError(f"{where}: {msg}")

    def get(self, obj: Any, key: str | int, where: str, kind=None, optional=False,
            default=None):
        here = f"{where}[{key!r}]" if isinstance(key, int) else f"{where}.{key}"
        if not isinstance(obj, (dict, list)):
            self.fail(where, "expected an object")
        try:
            val = obj[key]
        except (KeyError, IndexError, TypeError):
            if optional:
                return default, here
            self.fail(here, "missing field")
        if kind is not None and val is not None and not _is_kind(val, kind):
            self.fail(here, f"expected {kind}, got {type(val).__name__}")
        return val, here

    def number(self, obj, key, where) -> float:
        val, here = self.get(obj, key, where, "number")
        return float(val)

    def vector(self, obj, key, where, n: int | None = None) -> tuple[float, ...]:
        val, here = self.get(obj, key, where, "array")
        if n is not None and len(val) != n:
            self.fail(here, f"expected {n} entries, got {len(val)}")
        for i, v in enumerate(val):
            if not _is_kind(v, "number"):
                self.fail(f"{here}[{i}]", "expected number")
        return tuple(float(v) for v in val)


def _is_kind(val, kind: str) -> bool:
    if kind == "number":
        return isinstance(val, (int, float)) and not isinstance(val, bool)
    if kind == "integer":
        return isinstance(val, int) and not isinstance(val, bool)
    if kind == "array":
        return isinstance(val, list)
    if kind == "object":
        return isinstance(val, dict)
    if kind == "bool":
        return isinstance(val, bool)
    if kind == "string":
        return isinstance(val, str)
    raise AssertionError(kind)


def _wrap(where: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SceneFormatError:
        raise
    except ValidationError as exc:
        raise type(exc)(f"{where}: {exc}") from None


def camera_from_dict(d: dict, where: str = "camera") -> Camera:
    r = _Reader()
    ident, _ = r.get(d, "id", where, "integer")
    kwargs = {k: r.number(d, k, where) for k in ("fx", "fy", "cx", "cy", "width", "height",
                                                  "z", "yaw", "hfov")}
    return _wrap(where, Camera, id=ident, pos=r.vector(d, "pos", where, 2), **kwargs)


def box_from_dict(d: dict, where: str = "box") -> Box3D:
    r = _Reader()
    cls, _ = r.get(d, "class_id", where, "integer")
    return _wrap(where, Box3D, center=r.vector(d, "center", where, 3),
                 size=r.vector(d, "size", where, 3), yaw=r.number(d, "yaw", where),
                 score=r.number(d, "score", where), class_id=cls)


def detection_from_dict(d: dict, where: str) -> Detection2D:
    r = _Reader()
    cam, _ = r.get(d, "camera_id", where, "integer")
    cls, _ = r.get(d, "class_id", where, "integer")
    emb, here = r.get(d, "embedding", where, "array", optional=True)
    if emb is not None:
        emb = r.vector(d, "embedding", where)
    tl, _ = r.get(d, "truncated_left", where, "bool", optional=True, default=False)
    tr, _ = r.get(d, "truncated_right", where, "bool", optional=True, default=False)
    inst, _ = r.get(d, "instance_id", where, "integer", optional=True)
    return _wrap(where, Detection2D, camera_id=cam, bbox=r.vector(d, "bbox", where, 4),
                 score=r.number(d, "score", where), class_id=cls, embedding=emb,
                 truncated_left=tl, truncated_right=tr, instance_id=inst)


def frame_from_dict(d: dict, where: str, rig: CameraRig | None = None) -> Frame:
    r = _Reader()
    fid, _ = r.get(d, "frame_id", where, "integer")
    raw_dets, dwhere = r.get(d, "detections", where, "object")
    dets: dict[int, tuple[Detection2D, ...]] = {}
    for key, lst in raw_dets.items():
        kwhere = f"{dwhere}[{key!r}]"
        try:
            cam_id = int(key)
        except ValueError:
            r.fail(kwhere, "camera key must be an integer")
        if not isinstance(lst, list):
            r.fail(kwhere, "expected an array")
        dets[cam_id] = tuple(detection_from_dict(x, f"{kwhere}[{i}]") for i, x in enumerate(lst))
    lidar, lwhere = r.get(d, "lidar", where, "array")
    try:
        pts = np.array(lidar, dtype=np.float64).reshape(-1, 3) if lidar else np.zeros((0, 3))
        if lidar and pts.shape[0] != len(lidar):
            raise ValueError
    except (ValueError, TypeError):
        r.fail(lwhere, "expected a list of [x, y, z] numbers")
    raw_gt, gwhere = r.get(d, "ground_truth", where, "array")
    gts = []
    for i, g in enumerate(raw_gt):
        gw = f"{gwhere}[{i}]"
        inst, _ = r.get(g, "instance_id", gw, "integer")
        box_d, bw = r.get(g, "box", gw, "object")
        vis, vw = r.get(g, "visible_in", gw, "array")
        if not all(_is_kind(v, "integer") for v in vis):
            r.fail(vw, "expected integer camera ids")
        gts.append(_wrap(gw, GroundTruthObject, instance_id=inst, box=box_from_dict(box_d, bw),
                         visible_in=vis))
    frame = _wrap(where, Frame, frame_id=fid, detections=dets, lidar=pts, ground_truth=gts)
    if rig is not None:
        _wrap(where, frame.validate_against, rig)
    return frame


def rig_from_dict(d: dict, where: str = "$.rig") -> CameraRig:
    r = _Reader()
    cams, cwhere = r.get(d, "cameras", where, "array")
    cameras = [camera_from_dict(c, f"{cwhere}[{i}]") for i, c in enumerate(cams)]
    adj, awhere = r.get(d, "adjacency", where, "array", optional=True)
    return _wrap(where, CameraRig, cameras=cameras,
                 adjacency=None if adj is None else [tuple(p) for p in adj])


def scene_from_dict(d: dict) -> Scene:
    r = _Reader()
    if not isinstance(d, dict):
        r.fail("$", "expected a JSON object")
    version, vwhere = r.get(d, "format_version", "$", "integer")
    if version != FORMAT_VERSION:
        r.fail(vwhere, f"unsupported format_version {version}")
    rig_d, rwhere = r.get(d, "rig", "$", "object")
    rig = rig_from_dict(rig_d, rwhere)
    frames_d, fwhere = r.get(d, "frames", "$", "array")
    if not frames_d:
        raise ValidationError(f"{fwhere}: a scene needs at least one frame")
    frames = [frame_from_dict(f, f"{fwhere}[{i}]", rig) for i, f in enumerate(frames_d)]
    meta, _ = r.get(d, "meta", "$", "object", optional=True, default={})
    return _wrap("$", Scene, rig=rig, frames=frames, meta=meta or {})


def read_json(path: str | Path) -> Any:
    text = Path(path).read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def write_json(obj: Any, path: str | Path) -> None:
    # allow_nan=False keeps files strictly JSON; repr floats round-trip exactly
    Path(path).write_text(json.dumps(obj, allow_nan=False, sort_keys=True) + "\n")


def save_scene(scene: Scene, path: str | Path) -> None:
    write_json(scene_to_dict(scene), path)


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(read_json(path))


def iter_detections(frame: Frame, cameras: Iterable[int] | None = None):
    """Yield ``((camera_id, index), detection)`` in camera-id order."""
    for cam in sorted(frame.detections) if cameras is None else cameras:
        for i, det in enumerate(frame.detections.get(cam, ())):
            yield (cam, i), det


def boxes_to_array(boxes: Sequence[Box3D]) -> np.ndarray:
    """(n, 7) array ``[x, y, z, w, l, h, yaw]``."""
    if not boxes:
        return np.zeros((0, 7))
    return np.array([list(b.center) + list(b.size) + [b.yaw] for b in boxes])
