"""Bird's-eye-view IoU kernels and greedy score-ordered NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ValidationError
from .scene import Box3D


@dataclass(frozen=True)
class NmsConfig:
    iou_thr: float = 0.3
    mode: str = "axis_aligned"
    per_class: bool = True

    def __post_init__(self):
        if not 0.0 <= self.iou_thr <= 1.0:
            raise ValidationError("iou_thr must lie in [0, 1]")
        if self.mode not in ("axis_aligned", "rotated"):
            raise ValidationError(f"unknown NMS mode {self.mode!r}")


def _ratio(inter: float, area_a: float, area_b: float, same: bool) -> float:
    union = area_a + area_b - inter
    if union <= 0.0:
        return 1.0 if same else 0.0
    return min(1.0, max(0.0, inter / union))


def iou_axis_aligned_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the axis-aligned rectangles enclosing the two BEV footprints."""
    fa, fb = a.footprint(), b.footprint()
    lo_a, hi_a = fa.min(axis=0), fa.max(axis=0)
    lo_b, hi_b = fb.min(axis=0), fb.max(axis=0)
    ext = np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)
    inter = float(ext[0] * ext[1])
    area_a = float(np.prod(hi_a - lo_a))
    area_b = float(np.prod(hi_b - lo_b))
    same = bool(np.array_equal(lo_a, lo_b) and np.array_equal(hi_a, hi_b))
    return _ratio(inter, area_a, area_b, same)


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by counter-clockwise convex ``clipper``."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for k in range(n):
        if not out:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        pts, out = out, []
        for i in range(len(pts)):
            cur, prev = pts[i], pts[i - 1]
            s_cur, s_prev = side(cur), side(prev)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
    return np.array(out, dtype=float).reshape(-1, 2)


def iou_rotated_bev(a: Box3D, b: Box3D) -> float:
    """Exact IoU of the rotated BEV footprints by convex polygon clipping."""
    fa, fb = a.footprint(), b.footprint()
    inter = abs(polygon_area(clip_convex(fa, fb)))
    area_a = a.size[0] * a.size[1]
    area_b = b.size[0] * b.size[1]
    same = bool(np.allclose(fa, fb, rtol=0.0, atol=1e-12))
    if same:
        return 1.0
    return _ratio(inter, area_a, area_b, same)


def greedy_nms(boxes: Sequence[Box3D], cfg: NmsConfig = NmsConfig()) -> list[int]:
    """Indices of the boxes kept by greedy NMS, in decreasing score order.

    A box is suppressed when its IoU with a kept box is strictly greater than
    ``cfg.iou_thr``.  Equal scores keep input order.
    """
    iou = iou_axis_aligned_bev if cfg.mode == "axis_aligned" else iou_rotated_bev
    order = sorted(range(len(boxes)), key=lambda i: -boxes[i].score)
    suppressed = [False] * len(boxes)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if suppressed[j]:
                continue
            if cfg.per_class and boxes[j].class_id != boxes[i].class_id:
                continue
            if iou(boxes[i], boxes[j]) > cfg.iou_thr:
                suppressed[j] = True
    return keep


class BEVNonMaxSuppression(BaseEstimator):
    """Greedy BEV NMS as a stateless transformer over lists of boxes."""

    def __init__(self, iou_thr=0.3, mode="axis_aligned", per_class=True):
        self.iou_thr = iou_thr
        self.mode = mode
        self.per_class = per_class

    def fit(self, X=None, y=None):
        self.config_ = NmsConfig(self.iou_thr, self.mode, self.per_class)
        return self

    def transform(self, boxes: Sequence[Box3D]) -> list[Box3D]:
        cfg = getattr(self, "config_", None) or NmsConfig(self.iou_thr, self.mode, self.per_class)
        return [boxes[i] for i in greedy_nms(boxes, cfg)]

    def fit_transform(self, boxes, y=None):
        return self.fit().transform(boxes)
