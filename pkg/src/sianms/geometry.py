"""Frustum geometry: projection, frustums from image boxes, the merged-axis
construction for two-view detections, point selection and canonical rotation.

All frustums are expressed in the global (rig) frame.  Angular intervals are
closed and stored unwrapped, ``theta_min < theta_max`` with the lower bound in
(-pi, pi].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import BehindCameraError, DegenerateAxisError, OverlapError, ValidationError
from .scene import TWO_PI, Camera, normalize_angle, points_to_camera

_ANGLE_EPS = 1e-12


@dataclass(frozen=True)
class DetectionRange:
    d_max: float = 50.0

    def __post_init__(self):
        if not self.d_max > 0:
            raise ValidationError("d_max must be positive")


@dataclass(frozen=True)
class Ray:
    origin: tuple[float, float]
    direction: tuple[float, float]

    def __post_init__(self):
        dx, dy = self.direction
        n = math.hypot(dx, dy)
        if n == 0.0:
            raise DegenerateAxisError("ray direction is zero")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "direction", (dx / n, dy / n))

    @classmethod
    def from_angle(cls, origin, angle: float) -> "Ray":
        return cls(origin, (math.cos(angle), math.sin(angle)))

    @property
    def angle(self) -> float:
        return math.atan2(self.direction[1], self.direction[0])


@dataclass(frozen=True)
class Frustum:
    """Wedge behind an image box.

    ``v_slopes`` bounds ``(z - z_cam) / depth`` where ``depth`` is the distance
    along the source camera's optical axis ``yaw``; these are the two planes
    through the camera centre spanned by the box's top and bottom rows.
    """

    camera_id: int
    theta_min: float
    theta_max: float
    r_min: float = 0.0
    r_max: float = 50.0
    v_slopes: tuple[float, float] = (-math.inf, math.inf)
    origin: tuple[float, float] = (0.0, 0.0)
    z: float = 0.0
    yaw: float | None = None

    def __post_init__(self):
        lo, hi = float(self.theta_min), float(self.theta_max)
        width = hi - lo
        if not 0.0 < width <= math.pi + 1e-12:
            raise ValidationError(f"frustum angular width {width} outside (0, pi]")
        lo_n = normalize_angle(lo)
        object.__setattr__(self, "theta_min", lo_n)
        object.__setattr__(self, "theta_max", lo_n + width)
        if not 0.0 <= self.r_min < self.r_max:
            raise ValidationError("need 0 <= r_min < r_max")
        s_lo, s_hi = self.v_slopes
        if not s_lo <= s_hi:
            raise ValidationError("v_slopes must be ordered")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        if self.yaw is None:
            object.__setattr__(self, "yaw", normalize_angle(lo_n + width / 2.0))

    @property
    def interval(self) -> tuple[float, float]:
        return self.theta_min, self.theta_max

    @property
    def width(self) -> float:
        return self.theta_max - self.theta_min

    @property
    def center_angle(self) -> float:
        return normalize_angle(self.theta_min + self.width / 2.0)

    def z_interval(self, bearing: float, rng: float) -> tuple[float, float]:
        depth = rng * math.cos(bearing - self.yaw)
        lo, hi = self.v_slopes
        if math.isinf(lo) and math.isinf(hi):
            return -math.inf, math.inf
        if depth <= 0.0:
            return math.inf, -math.inf
        return self.z + lo * depth, self.z + hi * depth


# --------------------------------------------------------------------------- angular intervals

def angle_offset(theta, ref):
    """Counter-clockwise offset of ``theta`` from ``ref`` in [0, 2pi)."""
    return np.mod(np.asarray(theta, dtype=float) - ref, TWO_PI)


def angle_in_interval(theta, lo: float, hi: float):
    """Closed membership test for the interval [lo, hi] modulo 2pi."""
    d = angle_offset(theta, lo)
    width = hi - lo
    inside = (d <= width + _ANGLE_EPS) | (d >= TWO_PI - _ANGLE_EPS)
    return inside if np.ndim(inside) else bool(inside)


def intervals_intersect(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """Closed intersection test modulo 2pi."""
    return (angle_in_interval(b[0], a[0], a[1]) or angle_in_interval(a[0], b[0], b[1]))


def interval_intersection(a: tuple[float, float], b: tuple[float, float]):
    """Intersection of two intervals no wider than pi, or ``None``.

    The result is expressed in ``a``'s unwrapping.
    """
    b0 = a[0] + math.remainder(b[0] - a[0], TWO_PI)
    lo, hi = max(a[0], b0), min(a[1], b0 + (b[1] - b[0]))
    if lo > hi + _ANGLE_EPS:
        return None
    return lo, max(lo, hi)


def unwrap_near(theta: float, ref: float) -> float:
    """Representative of ``theta`` within pi of ``ref``."""
    return ref + math.remainder(theta - ref, TWO_PI)


# --------------------------------------------------------------------------- camera projection

def project_point(cam: Camera, p) -> tuple[float, float, float]:
    """Pinhole projection of a global point; returns ``(u, v, depth)``."""
    x, y, z = points_to_camera(cam, np.asarray(p, dtype=float))[0]
    if x <= 0.0:
        raise BehindCameraError(f"point {tuple(p)} is behind camera {cam.id} (depth {x})")
    return cam.cx + cam.fx * y / x, cam.cy - cam.fy * z / x, float(x)


def project_points(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Vectorised projection; rows with non-positive depth get NaN pixels."""
    loc = points_to_camera(cam, points)
    depth = loc[:, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(depth > 0, cam.cx + cam.fx * loc[:, 1] / depth, np.nan)
        v = np.where(depth > 0, cam.cy - cam.fy * loc[:, 2] / depth, np.nan)
    return np.column_stack([u, v, depth])


def pixel_bearing(cam: Camera, u: float) -> float:
    """Global bearing of the vertical image line at column ``u``."""
    return cam.yaw + math.atan((u - cam.cx) / cam.fx)


def frustum_from_bbox(cam: Camera, bbox, rng: DetectionRange = DetectionRange(),
                      r_min: float = 0.0) -> Frustum:
    u0, v0, u1, v1 = bbox
    lo, hi = pixel_bearing(cam, u0), pixel_bearing(cam, u1)
    slopes = ((cam.cy - v1) / cam.fy, (cam.cy - v0) / cam.fy)
    return Frustum(camera_id=cam.id, theta_min=lo, theta_max=hi, r_min=r_min, r_max=rng.d_max,
                   v_slopes=slopes, origin=cam.pos, z=cam.z, yaw=cam.yaw)


def coverage_frustum(cam: Camera, rng: DetectionRange = DetectionRange()) -> Frustum:
    """Whole-image frustum (no vertical limits)."""
    lo, hi = cam.coverage
    return Frustum(camera_id=cam.id, theta_min=lo, theta_max=hi, r_max=rng.d_max,
                   origin=cam.pos, z=cam.z, yaw=cam.yaw)


def single_axis(cam: Camera, bbox) -> Ray:
    """Ray from the camera through the bbox centre column."""
    uc = 0.5 * (bbox[0] + bbox[2])
    return Ray.from_angle(cam.pos, pixel_bearing(cam, uc))


# --------------------------------------------------------------------------- merged axis

def _circle_hit(origin, angle: float, center, radius: float) -> np.ndarray:
    o = np.asarray(origin, dtype=float)
    u = np.array([math.cos(angle), math.sin(angle)])
    oc = o - np.asarray(center, dtype=float)
    b = float(u @ oc)
    disc = b * b - (float(oc @ oc) - radius * radius)
    if disc < 0.0:
        raise DegenerateAxisError("ray misses the detection circle")
    return o + (-b + math.sqrt(disc)) * u


def circle_boundary_points(f1: Frustum, f2: Frustum, rng: DetectionRange = DetectionRange(),
                           origin=None) -> tuple[np.ndarray, np.ndarray]:
    """Outer points ``(p_l, p_r)`` of the union wedge on the detection circle.

    ``p_l`` is the union endpoint on ``f1``'s side and ``p_r`` the one on
    ``f2``'s side.  The circle is centred on ``origin``, by default the midpoint
    of the two camera positions.
    """
    if not intervals_intersect(f1.interval, f2.interval):
        raise OverlapError(
            f"frustums of cameras {f1.camera_id} and {f2.camera_id} are angularly disjoint")
    if origin is None:
        origin = 0.5 * (np.asarray(f1.origin) + np.asarray(f2.origin))
    center = np.asarray(origin, dtype=float)
    ref = f1.center_angle
    ends = []
    for f in (f1, f2):
        for theta in (f.theta_min, f.theta_max):
            p = _circle_hit(f.origin, theta, center, rng.d_max)
            seen = unwrap_near(math.atan2(p[1] - center[1], p[0] - center[0]), ref)
            ends.append((seen, p))
    c1 = 0.5 * (ends[0][0] + ends[1][0])
    c2 = 0.5 * (ends[2][0] + ends[3][0])
    lo = min(ends, key=lambda e: e[0])[1]
    hi = max(ends, key=lambda e: e[0])[1]
    return (hi, lo) if c1 >= c2 else (lo, hi)


def merged_axis(p_l, p_r, origin=(0.0, 0.0)) -> Ray:
    """Axis from ``origin`` through the midpoint of ``p_l`` and ``p_r``."""
    p_l, p_r = np.asarray(p_l, dtype=float), np.asarray(p_r, dtype=float)
    if np.array_equal(p_l, p_r):
        raise DegenerateAxisError("p_l and p_r coincide")
    p_m = 0.5 * (p_l + p_r)
    d = p_m - np.asarray(origin, dtype=float)
    if not np.any(d):
        raise DegenerateAxisError("midpoint coincides with the axis origin")
    return Ray(tuple(origin), tuple(d))


def pair_axis(f1: Frustum, f2: Frustum, rng: DetectionRange = DetectionRange()) -> Ray:
    origin = tuple(0.5 * (np.asarray(f1.origin) + np.asarray(f2.origin)))
    p_l, p_r = circle_boundary_points(f1, f2, rng, origin)
    return merged_axis(p_l, p_r, origin)


# --------------------------------------------------------------------------- canonical frame

def rotate_to_canonical(points, axis: Ray) -> np.ndarray:
    """Rigidly move ``points`` so ``axis`` becomes the +x axis through the origin.

    Works on (n, 2) or (n, 3) arrays; z is left untouched.
    """
    pts = np.array(points, dtype=float, ndmin=2)
    c, s = axis.direction
    xy = pts[:, :2] - np.asarray(axis.origin)
    out = pts.copy()
    out[:, 0] = c * xy[:, 0] + s * xy[:, 1]
    out[:, 1] = -s * xy[:, 0] + c * xy[:, 1]
    return out


def rotate_from_canonical(points, axis: Ray) -> np.ndarray:
    pts = np.array(points, dtype=float, ndmin=2)
    c, s = axis.direction
    out = pts.copy()
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + axis.origin[0]
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + axis.origin[1]
    return out


# --------------------------------------------------------------------------- point selection

def frustum_mask(f: Frustum, points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    dx = pts[:, 0] - f.origin[0]
    dy = pts[:, 1] - f.origin[1]
    bearing = np.arctan2(dy, dx)
    rng = np.hypot(dx, dy)
    mask = angle_in_interval(bearing, f.theta_min, f.theta_max)
    mask = np.asarray(mask) & (rng >= f.r_min) & (rng <= f.r_max)
    lo, hi = f.v_slopes
    if not (math.isinf(lo) and math.isinf(hi)):
        depth = dx * math.cos(f.yaw) + dy * math.sin(f.yaw)
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = (pts[:, 2] - f.z) / depth
        mask &= (depth > 0) & (slope >= lo) & (slope <= hi)
    return mask


def frustum_contains(f: Frustum, p) -> bool:
    return bool(frustum_mask(f, np.asarray(p, dtype=float))[0])


def frustums_overlap(f1: Frustum, f2: Frustum) -> bool:
    """Closed angular, range and vertical intersection test.

    The vertical check compares the two z-intervals at the middle of the shared
    wedge; for cameras sharing a position and height this is exact.
    """
    shared = interval_intersection(f1.interval, f2.interval)
    if shared is None:
        return False
    r_lo, r_hi = max(f1.r_min, f2.r_min), min(f1.r_max, f2.r_max)
    if r_lo > r_hi:
        return False
    bearing = 0.5 * (shared[0] + shared[1])
    r_mid = 0.5 * (r_lo + r_hi) if r_hi > 0 else r_hi
    z1, z2 = f1.z_interval(bearing, r_mid), f2.z_interval(bearing, r_mid)
    return max(z1[0], z2[0]) <= min(z1[1], z2[1])


def aggregate_frustum_points(f1: Frustum, f2: Frustum, lidar: np.ndarray,
                             return_index: bool = False):
    """Points inside either frustum, in input order, each once.

    Raises :class:`OverlapError` when the frustums do not overlap; callers
    treat that as a dismissed match.
    """
    if not frustums_overlap(f1, f2):
        raise OverlapError(
            f"frustums of cameras {f1.camera_id} and {f2.camera_id} do not overlap")
    pts = np.asarray(lidar, dtype=float).reshape(-1, 3)
    mask = frustum_mask(f1, pts) | frustum_mask(f2, pts)
    if return_index:
        return pts[mask], np.flatnonzero(mask)
    return pts[mask]


def debug_geometry(f1: Frustum, f2: Frustum, rng: DetectionRange = DetectionRange()) -> dict:
    """Wedges and axis construction points as plain JSON data, for plotting."""
    origin = tuple(0.5 * (np.asarray(f1.origin) + np.asarray(f2.origin)))
    out = {"kind": "geometry-debug", "d_max": rng.d_max, "origin": list(origin),
           "frustums": [{"camera_id": f.camera_id, "origin": list(f.origin),
                         "theta_min": f.theta_min, "theta_max": f.theta_max,
                         "r_min": f.r_min, "r_max": f.r_max} for f in (f1, f2)]}
    try:
        p_l, p_r = circle_boundary_points(f1, f2, rng, origin)
    except OverlapError:
        out["overlap"] = False
        return out
    out.update(overlap=frustums_overlap(f1, f2), p_l=p_l.tolist(), p_r=p_r.tolist(),
               p_m=(0.5 * (p_l + p_r)).tolist())
    return out
