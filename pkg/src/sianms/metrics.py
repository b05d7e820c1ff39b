"""Center-distance detection metrics: AP over several distance thresholds and
the true-positive errors ATE, ASE and AOE, for the whole scene or only the
overlap wedges of adjacent cameras."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ValidationError
from .geometry import DetectionRange, angle_in_interval
from .scene import CAR, Box3D, CameraRig, normalize_angle


@dataclass(frozen=True)
class EvalConfig:
    dist_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    region: str = "all"
    classes: tuple[int, ...] = (CAR,)
    recall_floor: float = 0.1
    tp_threshold: float = 2.0
    aoe_period: float = 2.0 * math.pi
    d_max: float = 50.0

    def __post_init__(self):
        th = tuple(float(t) for t in self.dist_thresholds)
        if not th or any(t <= 0 for t in th) or list(th) != sorted(th):
            raise ValidationError("distance thresholds must be positive and ascending")
        object.__setattr__(self, "dist_thresholds", th)
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if self.region not in ("all", "overlap_only"):
            raise ValidationError(f"unknown region {self.region!r}")
        if not 0.0 <= self.recall_floor < 1.0:
            raise ValidationError("recall_floor must lie in [0, 1)")
        if self.aoe_period not in (math.pi, 2.0 * math.pi):
            raise ValidationError("aoe_period must be pi or 2*pi")


@dataclass
class ClassMetrics:
    ap: float | None
    ap_per_threshold: dict[float, float | None]
    ate: float | None
    ase: float | None
    aoe: float | None
    tp: int
    fp: int
    fn: int
    n_gt: int


@dataclass
class EvalReport:
    per_class: dict[int, ClassMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for cls, m in sorted(self.per_class.items()):
            d = asdict(m)
            d["ap_per_threshold"] = {repr(k): v for k, v in m.ap_per_threshold.items()}
            out[str(cls)] = d
        return out


def center_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


def score_order(boxes: Sequence[Box3D]) -> list[int]:
    """Indices by descending score, input order among equal scores."""
    return sorted(range(len(boxes)), key=lambda i: -boxes[i].score)


def match_dets_to_gt(dets: Sequence[Box3D], gts: Sequence[Box3D], threshold: float):
    """Greedy score-ordered matching to the nearest unmatched ground truth.

    Returns ``(assignment, unmatched_gt)`` where ``assignment[i]`` is the
    matched ground-truth index of detection ``i`` or ``None`` (false positive).
    A match requires centre distance strictly below ``threshold``.
    """
    taken = [False] * len(gts)
    assignment: list[int | None] = [None] * len(dets)
    for i in score_order(dets):
        best, best_d = None, math.inf
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            d = center_distance(dets[i], g)
            if d < best_d:
                best, best_d = j, d
        if best is not None and best_d < threshold:
            taken[best] = True
            assignment[i] = best
    return assignment, [j for j, t in enumerate(taken) if not t]


def ap_from_ranked(is_tp: Sequence[bool], n_gt: int, recall_floor: float = 0.1) -> float | None:
    """AP in [0, 1] from TP flags ranked by descending score.

    Precision is sampled at the 101 recall levels 0, 0.01, ..., 1 using the
    best precision reached at or beyond each level.  Levels up to
    ``recall_floor`` are dropped and precision is shifted down by the floor and
    renormalised.  ``None`` when there is no ground truth.
    """
    if n_gt == 0:
        return None
    flags = np.asarray(is_tp, dtype=float)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    prec = tp / (tp + fp)
    rec = tp / n_gt
    # envelope: best precision at recall >= level
    env = np.maximum.accumulate(prec[::-1])[::-1]
    levels = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(rec, levels - 1e-12, side="left")
    sampled = np.where(idx < len(rec), env[np.minimum(idx, len(rec) - 1)], 0.0)
    if recall_floor > 0:
        sampled = sampled[int(round(100 * recall_floor)) + 1:]
        sampled = np.clip(sampled - recall_floor, 0.0, None) / (1.0 - recall_floor)
    return float(np.mean(sampled))


def ranked_flags(frames_dets: Sequence[Sequence[Box3D]], frames_gts: Sequence[Sequence[Box3D]],
                 threshold: float) -> tuple[list[bool], int, list[list[int | None]]]:
    """Pool per-frame matches into one score-ranked TP flag list.

    Ties are broken by frame order, then by input order within the frame.
    """
    pooled, assignments = [], []
    n_gt = 0
    for f, (dets, gts) in enumerate(zip(frames_dets, frames_gts)):
        assignment, _ = match_dets_to_gt(dets, gts, threshold)
        assignments.append(assignment)
        n_gt += len(gts)
        pooled.extend((-d.score, f, i, a is not None) for i, (d, a) in enumerate(zip(dets, assignment)))
    pooled.sort(key=lambda t: t[:3])
    return [t[3] for t in pooled], n_gt, assignments


def average_precision(frames_dets, frames_gts, threshold: float,
                      recall_floor: float = 0.1) -> float | None:
    flags, n_gt, _ = ranked_flags(frames_dets, frames_gts, threshold)
    return ap_from_ranked(flags, n_gt, recall_floor)


def ate(tp_pairs: Sequence[tuple[Box3D, Box3D]]) -> float | None:
    """Mean BEV centre distance over (detection, ground truth) pairs."""
    if not tp_pairs:
        return None
    return float(np.mean([center_distance(d, g) for d, g in tp_pairs]))


def aligned_iou(a: Box3D, b: Box3D) -> float:
    """3D IoU of two boxes after aligning centres and headings."""
    inter = float(np.prod(np.minimum(a.size, b.size)))
    return inter / (float(np.prod(a.size)) + float(np.prod(b.size)) - inter)


def ase(tp_pairs) -> float | None:
    """Mean ``1 - aligned IoU`` in percent."""
    if not tp_pairs:
        return None
    return 100.0 * float(np.mean([1.0 - aligned_iou(d, g) for d, g in tp_pairs]))


def yaw_error(a: float, b: float, period: float = 2.0 * math.pi) -> float:
    diff = abs(normalize_angle(a - b))
    if period == math.pi:
        diff = min(diff, math.pi - diff)
    return diff


def aoe(tp_pairs, period: float = 2.0 * math.pi) -> float | None:
    """Mean absolute heading difference in radians, wrapped to [0, period/2]."""
    if not tp_pairs:
        return None
    return float(np.mean([yaw_error(d.yaw, g.yaw, period) for d, g in tp_pairs]))


# --------------------------------------------------------------------------- regions

def overlap_wedges(rig: CameraRig) -> list[tuple[int, int]]:
    return list(rig.adjacency)


def in_overlap_region(xy, rig: CameraRig, rng: DetectionRange = DetectionRange()) -> bool:
    """True when a BEV point lies in the shared view of some adjacent pair."""
    x, y = float(xy[0]), float(xy[1])
    ox, oy = rig.origin
    if math.hypot(x - ox, y - oy) > rng.d_max:
        return False
    for a, b in rig.adjacency:
        inside = True
        for cam in (rig.camera(a), rig.camera(b)):
            bearing = math.atan2(y - cam.pos[1], x - cam.pos[0])
            if not angle_in_interval(bearing, *cam.coverage):
                inside = False
                break
        if inside:
            return True
    return False


def region_filter(boxes: Sequence[Box3D], rig: CameraRig, region: str = "all",
                  rng: DetectionRange = DetectionRange()) -> list[Box3D]:
    if region == "all":
        return list(boxes)
    if region != "overlap_only":
        raise ValidationError(f"unknown region {region!r}")
    return [b for b in boxes if in_overlap_region(b.center, rig, rng)]


# --------------------------------------------------------------------------- full evaluation

def evaluate(frames_dets: Sequence[Sequence[Box3D]], frames_gts: Sequence[Sequence[Box3D]],
             rig: CameraRig | None = None, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Evaluate per-frame detections against per-frame ground-truth boxes."""
    if len(frames_dets) != len(frames_gts):
        raise ValidationError("detections and ground truth cover different frame counts")
    rng = DetectionRange(cfg.d_max)
    if cfg.region != "all":
        if rig is None:
            raise ValidationError("region filtering needs the camera rig")
        frames_dets = [region_filter(d, rig, cfg.region, rng) for d in frames_dets]
        frames_gts = [region_filter(g, rig, cfg.region, rng) for g in frames_gts]
    report = EvalReport()
    for cls in cfg.classes:
        dets_c = [[b for b in d if b.class_id == cls] for d in frames_dets]
        gts_c = [[b for b in g if b.class_id == cls] for g in frames_gts]
        per_thr = {t: average_precision(dets_c, gts_c, t, cfg.recall_floor)
                   for t in cfg.dist_thresholds}
        vals = [v for v in per_thr.values() if v is not None]
        ap_mean = 100.0 * float(np.mean(vals)) if vals else None
        per_thr = {t: (None if v is None else 100.0 * v) for t, v in per_thr.items()}
        flags, n_gt, assignments = ranked_flags(dets_c, gts_c, cfg.tp_threshold)
        pairs = [(dets[i], gts[a]) for dets, gts, assignment in zip(dets_c, gts_c, assignments)
                 for i, a in enumerate(assignment) if a is not None]
        tp = len(pairs)
        report.per_class[cls] = ClassMetrics(
            ap=ap_mean, ap_per_threshold=per_thr, ate=ate(pairs), ase=ase(pairs),
            aoe=aoe(pairs, cfg.aoe_period), tp=tp, fp=len(flags) - tp, fn=n_gt - tp, n_gt=n_gt)
    return report
