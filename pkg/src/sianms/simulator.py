"""Deterministic synthetic multi-camera scenes.

A ring of cameras around the rig origin sees boxes placed on the ground plane.
Every camera produces jittered 2D boxes with truncation flags, scores and
instance-conditioned feature vectors; a LiDAR at the rig origin samples the
box faces it can see.  All randomness flows from one seeded generator.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .exceptions import ConfigError
from .geometry import angle_in_interval, intervals_intersect, unwrap_near
from .scene import (CAR, CYCLIST, PEDESTRIAN, Box3D, Camera, CameraRig, Detection2D, Frame,
                    GroundTruthObject, Scene, normalize_angle, points_to_camera)

# (length, width, height) means in metres
SIZE_PRIORS = {CAR: (4.5, 1.9, 1.7), PEDESTRIAN: (0.7, 0.7, 1.75), CYCLIST: (1.8, 0.6, 1.7)}


@dataclass(frozen=True)
class SimConfig:
    n_cameras: int = 6
    hfov: float = math.radians(70.0)
    yaw_spacing: float = math.radians(60.0)
    d_max: float = 50.0
    image_width: float = 1600.0
    image_height: float = 900.0
    camera_z: float = 1.5
    lidar_z: float = 1.8
    rig_offset: float = 0.0
    n_frames: int = 10
    objects_per_frame: tuple[int, int] = (8, 16)
    min_range: float = 5.0
    class_mix: dict = field(default_factory=lambda: {CAR: 1.0})
    size_sigma: float = 0.1
    bbox_sigma_px: float = 3.0
    min_bbox_px: float = 4.0
    dropout: float = 0.05
    score_sigma: float = 0.05
    feature_dim: int = 16
    embedding_sigma: float = 0.1
    view_drift: float = 0.2
    range_sigma: float = 0.02
    lidar_density: float = 20000.0
    max_points_per_object: int = 600
    ground_points: int = 400
    drift_sigma: float = 0.3
    respawn_prob: float = 0.1
    occlusion: bool = True
    max_occluded: float = 0.7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects_per_frame", tuple(int(v) for v in self.objects_per_frame))
        object.__setattr__(self, "class_mix", {int(k): float(v) for k, v in self.class_mix.items()})
        if self.n_cameras < 1:
            raise ConfigError("need at least one camera")
        if not 0 < self.hfov < math.pi:
            raise ConfigError("hfov must lie in (0, pi)")
        if self.n_cameras > 1 and self.hfov <= self.yaw_spacing:
            raise ConfigError(
                f"hfov {math.degrees(self.hfov):.3f} deg <= spacing "
                f"{math.degrees(self.yaw_spacing):.3f} deg: adjacent cameras would not overlap")
        sigmas = (self.size_sigma, self.bbox_sigma_px, self.score_sigma, self.embedding_sigma,
                  self.view_drift, self.range_sigma, self.drift_sigma)
        if any(s < 0 for s in sigmas):
            raise ConfigError("noise parameters must be non-negative")
        if not (0.0 <= self.dropout <= 1.0 and 0.0 <= self.respawn_prob <= 1.0
                and 0.0 <= self.max_occluded <= 1.0):
            raise ConfigError("probabilities must lie in [0, 1]")
        lo, hi = self.objects_per_frame
        if not 0 <= lo <= hi:
            raise ConfigError("objects_per_frame must be an ordered pair of counts")
        if not 0 < self.min_range < self.d_max:
            raise ConfigError("need 0 < min_range < d_max")
        if self.n_frames < 0:
            raise ConfigError("n_frames must be non-negative")
        if not self.class_mix or any(k not in SIZE_PRIORS or v < 0 for k, v in self.class_mix.items()):
            raise ConfigError("class_mix must weight known classes")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_frame"] = list(self.objects_per_frame)
        d["class_mix"] = {str(k): v for k, v in self.class_mix.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown simulator options: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "SimConfig":
        d = asdict(self)
        d.update(changes)
        return SimConfig(**d)


def generate_rig(cfg: SimConfig = SimConfig()) -> CameraRig:
    """Cameras at yaw ``k * spacing``; adjacency is cyclic in that order."""
    cams = []
    for k in range(cfg.n_cameras):
        yaw = normalize_angle(k * cfg.yaw_spacing)
        pos = (cfg.rig_offset * math.cos(yaw), cfg.rig_offset * math.sin(yaw))
        cams.append(Camera.from_hfov(k, cfg.hfov, cfg.image_width, cfg.image_height, pos=pos,
                                     z=cfg.camera_z, yaw=yaw))
    return CameraRig(tuple(cams))


@dataclass
class _Instance:
    instance_id: int
    class_id: int
    size: tuple[float, float, float]  # (w, l, h)
    xy: np.ndarray
    yaw: float
    latent: np.ndarray
    view_dir: np.ndarray

    def box(self) -> Box3D:
        return Box3D(center=(self.xy[0], self.xy[1], self.size[2] / 2.0), size=self.size,
                     yaw=self.yaw, class_id=self.class_id)

    @property
    def radius(self) -> float:
        return 0.5 * math.hypot(self.size[0], self.size[1])


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


class _World:
    """Persistent instances evolving over the frames of one scene."""

    def __init__(self, cfg: SimConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.instances: list[_Instance] = []
        self.next_id = 0
        classes = sorted(cfg.class_mix)
        weights = np.array([cfg.class_mix[c] for c in classes], dtype=float)
        self.classes, self.class_p = classes, weights / weights.sum()

    def _fits(self, inst: _Instance, others) -> bool:
        r = float(np.hypot(*inst.xy))
        if not self.cfg.min_range <= r <= self.cfg.d_max:
            return False
        return all(np.hypot(*(inst.xy - o.xy)) > inst.radius + o.radius + 0.5
                   for o in others if o is not inst)

    def spawn(self, xy=None, yaw=None, class_id=None, size=None) -> _Instance:
        cfg, rng = self.cfg, self.rng
        cls = class_id if class_id is not None else self.classes[rng.choice(len(self.classes), p=self.class_p)]
        if size is None:
            l, w, h = (m * max(0.3, 1.0 + cfg.size_sigma * rng.normal()) for m in SIZE_PRIORS[cls])
            size = (w, l, h)
        latent = _unit(rng, cfg.feature_dim)
        view_dir = _unit(rng, cfg.feature_dim)
        for _ in range(100):
            if xy is None:
                r = math.sqrt(rng.uniform(cfg.min_range ** 2, cfg.d_max ** 2))
                phi = rng.uniform(-math.pi, math.pi)
                pos = np.array([r * math.cos(phi), r * math.sin(phi)])
            else:
                pos = np.asarray(xy, dtype=float)
            heading = rng.uniform(-math.pi, math.pi) if yaw is None else yaw
            inst = _Instance(self.next_id, cls, tuple(size), pos, normalize_angle(heading),
                             latent, view_dir)
            if xy is not None or self._fits(inst, self.instances):
                self.next_id += 1
                self.instances.append(inst)
                return inst
        return None

    def step(self) -> None:
        cfg, rng = self.cfg, self.rng
        kept = []
        for inst in self.instances:
            if rng.random() < cfg.respawn_prob:
                continue
            inst.xy = inst.xy + rng.normal(0.0, cfg.drift_sigma, 2)
            inst.yaw = normalize_angle(inst.yaw + rng.normal(0.0, 0.05))
            if self._fits(inst, kept):
                kept.append(inst)
        self.instances = kept
        lo, hi = cfg.objects_per_frame
        target = int(rng.integers(lo, hi + 1))
        while len(self.instances) > target:
            self.instances.pop(int(rng.integers(len(self.instances))))
        attempts = 0
        while len(self.instances) < target and attempts < 4 * target + 10:
            self.spawn()
            attempts += 1


def _angular_extent(cam: Camera, box: Box3D) -> tuple[float, float, float]:
    """Bearing interval of the footprint relative to the optical axis, and the
    bearing of the box centre."""
    loc = points_to_camera(cam, np.column_stack([box.footprint(), np.zeros(4)]))
    centre = points_to_camera(cam, np.asarray(box.center))[0]
    ref = math.atan2(centre[1], centre[0])
    angles = [unwrap_near(math.atan2(p[1], p[0]), ref) for p in loc]
    return min(angles), max(angles), ref


def _corners3d(box: Box3D) -> np.ndarray:
    fp = box.footprint()
    z0 = box.center[2] - box.size[2] / 2.0
    z1 = box.center[2] + box.size[2] / 2.0
    return np.vstack([np.column_stack([fp, np.full(4, z0)]), np.column_stack([fp, np.full(4, z1)])])


@dataclass
class ImageBox:
    bbox: tuple[float, float, float, float]
    truncated_left: bool
    truncated_right: bool
    visible_fraction: float
    bearing: float  # box-centre bearing w.r.t. the optical axis


def _subtract(lo: float, hi: float, holes) -> list[tuple[float, float]]:
    parts = [(lo, hi)]
    for h_lo, h_hi in holes:
        nxt = []
        for a, b in parts:
            if h_hi <= a or h_lo >= b:
                nxt.append((a, b))
                continue
            if h_lo > a:
                nxt.append((a, h_lo))
            if h_hi < b:
                nxt.append((h_hi, b))
        parts = nxt
    return parts


def image_box(cam: Camera, box: Box3D, min_px: float = 1.0, occluders=(),
              max_occluded: float = 1.0) -> ImageBox | None:
    """Noise-free 2D box of ``box`` in ``cam``, clipped to the image, or None.

    ``occluders`` are boxes nearer to the camera; the image box then spans
    only the unoccluded bearings, and the object is dropped once more than
    ``max_occluded`` of its bearing extent is hidden.
    """
    lo, hi, ref = _angular_extent(cam, box)
    half = cam.hfov / 2.0
    if abs(ref) > math.pi / 2 + half:
        return None
    holes = []
    for occ in occluders:
        o_lo, o_hi, o_ref = _angular_extent(cam, occ)
        shift = unwrap_near(o_ref, ref) - o_ref
        holes.append((o_lo + shift, o_hi + shift))
    parts = _subtract(lo, hi, holes)
    if not parts or sum(b - a for a, b in parts) < (1.0 - max_occluded) * (hi - lo):
        return None
    m_lo, m_hi = parts[0][0], parts[-1][1]
    c_lo, c_hi = max(m_lo, -half), min(m_hi, half)
    if c_lo >= c_hi:
        return None
    u0 = cam.cx + cam.fx * math.tan(c_lo)
    u1 = cam.cx + cam.fx * math.tan(c_hi)
    u0, u1 = max(0.0, u0), min(cam.width, u1)
    if u1 - u0 < min_px:
        return None
    loc = points_to_camera(cam, _corners3d(box))
    front = loc[loc[:, 0] > 0.1]
    if len(front) == 0:
        return None
    v = cam.cy - cam.fy * front[:, 2] / front[:, 0]
    v0, v1 = max(0.0, float(v.min())), min(cam.height, float(v.max()))
    if v1 - v0 < min_px:
        return None
    shown = sum(max(0.0, min(b, half) - max(a, -half)) for a, b in parts)
    return ImageBox((u0, v0, u1, v1), m_lo < -half, m_hi > half, shown / (hi - lo), ref)


def _jitter_bbox(ib: ImageBox, cam: Camera, sigma: float, rng: np.random.Generator):
    u0, v0, u1, v1 = ib.bbox
    n = rng.normal(0.0, sigma, 4)
    u0 = u0 if ib.truncated_left else u0 + n[0]
    u1 = u1 if ib.truncated_right else u1 + n[2]
    v0, v1 = v0 + n[1], v1 + n[3]
    u0, u1 = min(max(u0, 0.0), cam.width - 1.0), max(min(u1, cam.width), 1.0)
    v0, v1 = min(max(v0, 0.0), cam.height - 1.0), max(min(v1, cam.height), 1.0)
    if u1 <= u0:
        u0, u1 = max(0.0, u0 - 0.5), min(cam.width, u0 + 0.5)
    if v1 <= v0:
        v0, v1 = max(0.0, v0 - 0.5), min(cam.height, v0 + 0.5)
    return u0, v0, u1, v1


def visible_faces(box: Box3D, origin=(0.0, 0.0)) -> list[tuple[np.ndarray, np.ndarray]]:
    """Side faces (as BEV edge endpoints) facing ``origin``."""
    fp = box.footprint()
    c = box.xy
    faces = []
    for k in range(4):
        a, b = fp[k], fp[(k + 1) % 4]
        mid = 0.5 * (a + b)
        normal = mid - c
        if float(normal @ (mid - np.asarray(origin))) < 0.0:
            faces.append((a, b))
    return faces


def sample_box_surface(box: Box3D, n: int, rng: np.random.Generator, origin=(0.0, 0.0),
                       sensor_z: float = 1.8, range_sigma: float = 0.0) -> np.ndarray:
    """``n`` LiDAR returns on the faces of ``box`` visible from ``origin``."""
    faces = visible_faces(box, origin)
    if n <= 0 or not faces:
        return np.zeros((0, 3))
    lengths = np.array([np.linalg.norm(b - a) for a, b in faces])
    which = rng.choice(len(faces), size=n, p=lengths / lengths.sum())
    t = rng.random(n)
    z = box.center[2] - box.size[2] / 2.0 + rng.random(n) * box.size[2]
    starts = np.array([faces[k][0] for k in which])
    ends = np.array([faces[k][1] for k in which])
    xy = starts + t[:, None] * (ends - starts)
    pts = np.column_stack([xy, z])
    if range_sigma > 0:
        sensor = np.array([origin[0], origin[1], sensor_z])
        ray = pts - sensor
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        pts = pts + rng.normal(0.0, range_sigma, (n, 1)) * ray
    return pts


def occluded_mask(points: np.ndarray, owner: np.ndarray, boxes, sensor=(0.0, 0.0)) -> np.ndarray:
    """True for points whose BEV sight line from ``sensor`` crosses the
    footprint of a box other than their own (``owner`` is -1 for clutter)."""
    pts = np.asarray(points, dtype=float)
    hidden = np.zeros(len(pts), dtype=bool)
    s = np.asarray(sensor, dtype=float)
    for k, box in enumerate(boxes):
        c, sn = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, sn], [-sn, c]])
        p0 = rot @ (s - box.xy)
        d = (pts[:, :2] - box.xy) @ rot.T - p0
        half = np.array([box.size[1] / 2.0, box.size[0] / 2.0])
        t_in = np.zeros(len(pts))
        t_out = np.full(len(pts), 1.0 - 1e-9)
        for ax in range(2):
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half[ax] - p0[ax]) / d[:, ax]
                t2 = (half[ax] - p0[ax]) / d[:, ax]
            flat = d[:, ax] == 0.0
            inside = abs(p0[ax]) <= half[ax]
            lo = np.where(flat, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
            hi = np.where(flat, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
            t_in, t_out = np.maximum(t_in, lo), np.minimum(t_out, hi)
        hidden |= (t_in <= t_out) & (owner != k)
    return hidden


def _render_frame(frame_id: int, instances, rig: CameraRig, cfg: SimConfig,
                  rng: np.random.Generator) -> Frame:
    dets = {cam.id: [] for cam in rig.cameras}
    gts = []
    origin = rig.origin
    boxes = [inst.box() for inst in instances]
    for k, inst in enumerate(instances):
        box = boxes[k]
        visible = []
        for cam in rig.cameras:
            occluders = ()
            if cfg.occlusion:
                mine = float(np.hypot(*(box.xy - np.asarray(cam.pos))))
                occluders = [b for j, b in enumerate(boxes) if j != k
                             and float(np.hypot(*(b.xy - np.asarray(cam.pos)))) < mine]
            ib = image_box(cam, box, cfg.min_bbox_px, occluders, cfg.max_occluded)
            if ib is None:
                continue
            visible.append(cam.id)
            if rng.random() < cfg.dropout:
                continue
            bbox = _jitter_bbox(ib, cam, cfg.bbox_sigma_px, rng)
            rng_frac = float(np.hypot(*inst.xy)) / cfg.d_max
            score = 0.95 - 0.4 * (1.0 - ib.visible_fraction) - 0.3 * rng_frac
            score = float(np.clip(score + rng.normal(0.0, cfg.score_sigma), 0.01, 1.0))
            feat = (inst.latent + cfg.view_drift * ib.bearing * inst.view_dir
                    + rng.normal(0.0, cfg.embedding_sigma, cfg.feature_dim))
            dets[cam.id].append(Detection2D(
                camera_id=cam.id, bbox=bbox, score=score, class_id=inst.class_id,
                embedding=feat, truncated_left=ib.truncated_left,
                truncated_right=ib.truncated_right, instance_id=inst.instance_id))
        if visible:
            gts.append(GroundTruthObject(inst.instance_id, box, tuple(visible)))
    clouds, owners = [], []
    for k, (inst, box) in enumerate(zip(instances, boxes)):
        r = max(float(np.hypot(*(inst.xy - np.asarray(origin)))), 1.0)
        n = int(min(cfg.max_points_per_object, round(cfg.lidar_density / r ** 2)))
        clouds.append(sample_box_surface(box, n, rng, origin, cfg.lidar_z, cfg.range_sigma))
        owners.append(np.full(len(clouds[-1]), k))
    if cfg.ground_points:
        r = cfg.d_max * np.sqrt(rng.random(cfg.ground_points))
        phi = rng.uniform(-math.pi, math.pi, cfg.ground_points)
        clouds.append(np.column_stack([r * np.cos(phi) + origin[0], r * np.sin(phi) + origin[1],
                                       rng.normal(0.0, 0.03, cfg.ground_points)]))
        owners.append(np.full(cfg.ground_points, -1))
    lidar = np.vstack(clouds) if clouds else np.zeros((0, 3))
    if cfg.occlusion and len(lidar):
        lidar = lidar[~occluded_mask(lidar, np.concatenate(owners), boxes, origin)]
    return Frame(frame_id=frame_id, detections={k: tuple(v) for k, v in dets.items()},
                 lidar=lidar, ground_truth=tuple(gts))


def generate_frame(cfg: SimConfig = SimConfig(), rng=None, frame_id: int = 0,
                   rig: CameraRig | None = None) -> Frame:
    """One independent frame with freshly placed objects."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    rig = rig or generate_rig(cfg)
    world = _World(cfg, rng)
    world.step()
    return _render_frame(frame_id, world.instances, rig, cfg, rng)


def generate_scene(cfg: SimConfig = SimConfig()) -> Scene:
    """``cfg.n_frames`` frames of persistent, slowly drifting instances."""
    if cfg.n_frames < 1:
        raise ConfigError("a scene needs n_frames >= 1")
    rng = np.random.default_rng(cfg.seed)
    rig = generate_rig(cfg)
    world = _World(cfg, rng)
    frames = []
    for k in range(cfg.n_frames):
        world.step()
        frames.append(_render_frame(k, world.instances, rig, cfg, rng))
    return Scene(rig=rig, frames=tuple(frames), meta={"generator": "sianms.simulator",
                                                      "seed": cfg.seed, "config": cfg.to_dict()})


def straddling_scene(cfg: SimConfig = SimConfig(), seed: int = 0, pair_index: int = 0) -> Scene:
    """One frame with a single car centred in the overlap wedge of an adjacent
    camera pair, large enough to be truncated in both images."""
    rng = np.random.default_rng(seed)
    cfg = cfg.replace(dropout=0.0, seed=seed)
    rig = generate_rig(cfg)
    a, b = rig.adjacency[pair_index]
    ca, cb = rig.camera(a), rig.camera(b)
    lo_a, hi_a = ca.coverage
    lo_b, hi_b = cb.coverage
    if angle_in_interval(lo_b, lo_a, hi_a):
        wedge = (lo_b, unwrap_near(hi_a, lo_b))
    else:
        wedge = (lo_a, unwrap_near(hi_b, lo_a))
    bisector = 0.5 * (wedge[0] + wedge[1])
    world = _World(cfg, rng)
    for _ in range(100):
        r = rng.uniform(8.0, 20.0)
        phi = bisector + rng.uniform(-0.3, 0.3) * (wedge[1] - wedge[0])
        inst = world.spawn(xy=(r * math.cos(phi), r * math.sin(phi)),
                           yaw=rng.uniform(-math.pi, math.pi), class_id=CAR)
        box = inst.box()
        ia, ib = image_box(ca, box), image_box(cb, box)
        both = ia is not None and ib is not None
        if both and (ia.truncated_left or ia.truncated_right) and (ib.truncated_left or ib.truncated_right):
            break
        world.instances.clear()
    frame = _render_frame(0, world.instances, rig, cfg, rng)
    return Scene(rig=rig, frames=(frame,), meta={"generator": "sianms.simulator.straddling",
                                                 "seed": seed, "config": cfg.to_dict()})


def coverage_wedges_intersect(rig: CameraRig, box: Box3D, cameras) -> bool:
    """Whether the footprint's bearing interval meets every listed camera's view."""
    for cid in cameras:
        cam = rig.camera(cid)
        lo, hi, _ = _angular_extent(cam, box)
        interval = (normalize_angle(cam.yaw + lo), normalize_angle(cam.yaw + lo) + (hi - lo))
        if not intervals_intersect(interval, cam.coverage):
            return False
    return True
