"""Geometric 3D box estimation from frustum point clouds.

This stands in for a learned frustum box regressor: remove ground returns,
keep the nearest depth cluster along the frustum axis and fit the
minimum-area rectangle to its bird's-eye-view footprint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import DegenerateFitError, EmptyFitError, ValidationError
from .geometry import Ray, rotate_from_canonical, rotate_to_canonical
from .scene import CAR, Box3D
from .validation import check_points


@dataclass(frozen=True)
class FitConfig:
    ground_z_thr: float = 0.3
    cluster_gap: float = 1.0
    min_points: int = 5
    area_tolerance: float = 0.2

    def __post_init__(self):
        if not (self.ground_z_thr > 0 and self.cluster_gap > 0 and self.min_points > 0):
            raise ValidationError("fit parameters must be positive")
        if not self.area_tolerance >= 0:
            raise ValidationError("area_tolerance must be non-negative")


def ground_filter(points, cfg: FitConfig = FitConfig()) -> np.ndarray:
    """Drop points at or below ``ground_z_thr`` (ground plane is z = 0)."""
    pts = check_points(points)
    return pts[pts[:, 2] > cfg.ground_z_thr]


def nearest_cluster(points, cfg: FitConfig = FitConfig()) -> np.ndarray:
    """First run of points along +x whose consecutive gaps stay within
    ``cluster_gap`` and that holds at least ``min_points`` points.

    ``points`` must already be in the canonical frame of the frustum axis.
    Raises :class:`EmptyFitError` when no run is large enough.
    """
    pts = check_points(points)
    if len(pts) < cfg.min_points:
        raise EmptyFitError(f"{len(pts)} points, need {cfg.min_points}")
    order = np.argsort(pts[:, 0], kind="stable")
    xs = pts[order, 0]
    breaks = np.flatnonzero(np.diff(xs) > cfg.cluster_gap) + 1
    start = 0
    for stop in list(breaks) + [len(xs)]:
        if stop - start >= cfg.min_points:
            return pts[order[start:stop]]
        start = stop
    raise EmptyFitError(f"no cluster with {cfg.min_points} points")


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> np.ndarray:
    """Counter-clockwise hull vertices (monotone chain, collinear points dropped)."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float)[:, :2])))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def _half_turn(angle: float) -> float:
    """Wrap to (-pi/2, pi/2]."""
    a = math.remainder(angle, math.pi)
    return a + math.pi if a <= -math.pi / 2 else a


def _hull_rectangles(pts: np.ndarray, hull: np.ndarray):
    """Enclosing rectangles with one side on each hull edge.

    Yields ``(area, closeness, e, n, a0, a1, b0, b1)`` where ``closeness`` is
    the mean distance of the points to the nearest rectangle side.
    """
    for k in range(len(hull)):
        edge = hull[(k + 1) % len(hull)] - hull[k]
        e = edge / math.hypot(edge[0], edge[1])
        n = np.array([-e[1], e[0]])
        a, b = pts @ e, pts @ n
        a0, a1, b0, b1 = a.min(), a.max(), b.min(), b.max()
        gap = np.minimum(np.minimum(a - a0, a1 - a), np.minimum(b - b0, b1 - b))
        yield (a1 - a0) * (b1 - b0), float(gap.mean()), e, n, a0, a1, b0, b1


def footprint_rectangle(points, area_tolerance: float = 0.0):
    """Enclosing BEV rectangle with a side on a hull edge.

    With ``area_tolerance == 0`` this is the minimum-area rectangle.  Otherwise
    every hull-edge rectangle whose area is within ``(1 + area_tolerance)`` of
    the minimum competes, and the one whose sides lie closest to the points
    wins.  That resolves the near-tie between the true box and the
    hypotenuse-aligned one when only two faces of a box were sampled.

    Returns ``(center_xy, (w, l), yaw)`` with ``l >= w``, the long side along
    ``yaw`` and ``yaw`` in (-pi/2, pi/2].
    """
    pts = check_points(points, dim=2)
    if len(pts) < 3:
        raise DegenerateFitError(f"need at least 3 points, got {len(pts)}")
    hull = convex_hull(pts)
    if len(hull) < 3:
        raise DegenerateFitError("points are collinear")
    rects = list(_hull_rectangles(hull if area_tolerance == 0 else pts, hull))
    a_min = min(r[0] for r in rects)
    if area_tolerance == 0:
        best = next(r for r in rects if r[0] == a_min)
    else:
        best = min((r for r in rects if r[0] <= a_min * (1.0 + area_tolerance)),
                   key=lambda r: r[1])
    _, _, e, n, a0, a1, b0, b1 = best
    center = e * (a0 + a1) / 2.0 + n * (b0 + b1) / 2.0
    along, across = a1 - a0, b1 - b0
    if along >= across:
        size, heading = (across, along), math.atan2(e[1], e[0])
    else:
        size, heading = (along, across), math.atan2(n[1], n[0])
    if size[0] <= 0.0:
        raise DegenerateFitError("zero-width rectangle")
    return center, size, _half_turn(heading)


def min_area_rect_bev(points) -> tuple[np.ndarray, tuple[float, float], float]:
    """Minimum-area enclosing rectangle of the BEV projection (rotating calipers).

    Returns ``(center_xy, (w, l), yaw)`` with ``l >= w``, the long side along
    ``yaw`` and ``yaw`` in (-pi/2, pi/2].
    """
    return footprint_rectangle(points, 0.0)


def fit_box_or_raise(points, axis: Ray, cfg: FitConfig = FitConfig(), class_id: int = CAR,
                     score: float = 1.0) -> Box3D:
    """Like :func:`fit_box` but raises :class:`EmptyFitError` or
    :class:`DegenerateFitError` instead of returning ``None``."""
    pts = check_points(points)
    if len(pts) == 0:
        raise EmptyFitError("empty frustum")
    canon = rotate_to_canonical(pts, axis)
    cluster = nearest_cluster(ground_filter(canon, cfg), cfg)
    center, (w, l), yaw = footprint_rectangle(cluster[:, :2], cfg.area_tolerance)
    z0, z1 = float(cluster[:, 2].min()), float(cluster[:, 2].max())
    h = max(z1 - z0, 1e-3)
    cxy = rotate_from_canonical(np.array([[center[0], center[1], 0.0]]), axis)[0]
    return Box3D(center=(cxy[0], cxy[1], 0.5 * (z0 + z1)), size=(w, l, h),
                 yaw=yaw + axis.angle, score=score, class_id=class_id)


def fit_box(points, axis: Ray, cfg: FitConfig = FitConfig(), class_id: int = CAR,
            score: float = 1.0) -> Box3D | None:
    """Estimate a global-frame box from frustum points, or ``None`` when the
    points cannot support a fit."""
    try:
        return fit_box_or_raise(points, axis, cfg, class_id, score)
    except (EmptyFitError, DegenerateFitError):
        return None


class FrustumBoxFitter(BaseEstimator):
    """Estimator wrapper around :func:`fit_box`; stateless."""

    def __init__(self, ground_z_thr=0.3, cluster_gap=1.0, min_points=5, area_tolerance=0.2):
        self.ground_z_thr = ground_z_thr
        self.cluster_gap = cluster_gap
        self.min_points = min_points
        self.area_tolerance = area_tolerance

    @property
    def config(self) -> FitConfig:
        return FitConfig(self.ground_z_thr, self.cluster_gap, self.min_points, self.area_tolerance)

    def fit(self, X=None, y=None):
        return self

    def predict(self, points, axis: Ray, class_id: int = CAR, score: float = 1.0):
        return fit_box(points, axis, self.config, class_id, score)
