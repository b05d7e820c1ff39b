"""Cross-camera re-identification: candidate gating in overlap wedges,
embedding distances, threshold filtering and one-to-one matching."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .assignment import hungarian
from .exceptions import NotAdjacentError, ValidationError
from .geometry import DetectionRange, frustum_from_bbox, intervals_intersect
from .scene import CAR, CameraRig, Detection2D, Frame, Scene
from .validation import check_distance_matrix, check_embeddings

DetectionRef = tuple[int, int]  # (camera_id, index within that camera's list)


@dataclass(frozen=True)
class AssociationConfig:
    dis_thr: float = 2.0
    mode: str = "greedy"
    classes: frozenset[int] | None = frozenset({CAR})

    def __post_init__(self):
        if not self.dis_thr >= 0:
            raise ValidationError("dis_thr must be non-negative")
        if self.mode not in ("greedy", "optimal"):
            raise ValidationError(f"unknown matching mode {self.mode!r}")
        if self.classes is not None:
            object.__setattr__(self, "classes", frozenset(int(c) for c in self.classes))


@dataclass
class MatchResult:
    """Accepted pairs ``(a, b, distance)`` plus everything left unpaired.

    For matrix-level matching ``a``/``b`` are row/column indices; for
    frame-level matching they are :data:`DetectionRef` tuples.
    """

    pairs: list[tuple] = field(default_factory=list)
    unmatched_a: list = field(default_factory=list)
    unmatched_b: list = field(default_factory=list)

    @property
    def unmatched(self) -> list:
        return self.unmatched_a + self.unmatched_b


def _dis_thr(cfg) -> float:
    return cfg.dis_thr if isinstance(cfg, AssociationConfig) else float(cfg)


def overlap_candidates(rig: CameraRig, frame: Frame, cam_pair: tuple[int, int],
                       cfg: AssociationConfig = AssociationConfig(),
                       rng: DetectionRange = DetectionRange()):
    """Detections of either camera whose frustum reaches into the other's view."""
    a, b = cam_pair
    if not rig.is_adjacent(a, b):
        raise NotAdjacentError(f"cameras {a} and {b} are not adjacent in the rig")
    out = []
    for mine, other in ((a, b), (b, a)):
        cam = rig.camera(mine)
        other_cov = rig.camera(other).coverage
        refs = []
        for i, det in enumerate(frame.detections.get(mine, ())):
            if cfg.classes is not None and det.class_id not in cfg.classes:
                continue
            f = frustum_from_bbox(cam, det.bbox, rng)
            if intervals_intersect(f.interval, other_cov):
                refs.append((mine, i))
        out.append(refs)
    return out[0], out[1]


def pairwise_distances(emb_a, emb_b) -> np.ndarray:
    """Euclidean distance matrix ``M[i, j] = ||a_i - b_j||``."""
    A = check_embeddings(emb_a)
    B = check_embeddings(emb_b)
    if not A.shape[0] or not B.shape[0]:
        return np.zeros((A.shape[0], B.shape[0]))
    if A.shape[1] != B.shape[1]:
        raise ValidationError(f"embedding dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def greedy_match(M, cfg=AssociationConfig()) -> MatchResult:
    """Accept pairs in ascending distance, skipping consumed rows/columns.

    Entries above ``dis_thr`` are discarded first; ties go to the lower row,
    then the lower column.
    """
    M = check_distance_matrix(M)
    thr = _dis_thr(cfg)
    n, m = M.shape
    rows, cols = np.nonzero(M <= thr)
    order = np.lexsort((cols, rows, M[rows, cols]))
    used_r = np.zeros(n, dtype=bool)
    used_c = np.zeros(m, dtype=bool)
    pairs = []
    for k in order:
        i, j = int(rows[k]), int(cols[k])
        if used_r[i] or used_c[j]:
            continue
        used_r[i] = used_c[j] = True
        pairs.append((i, j, float(M[i, j])))
    return MatchResult(pairs, [int(i) for i in np.flatnonzero(~used_r)],
                       [int(j) for j in np.flatnonzero(~used_c)])


def optimal_match(M, cfg=AssociationConfig()) -> MatchResult:
    """Largest set of admissible pairs, minimum total distance among those.

    Admissible entries get cost ``d - K`` with ``K`` above any possible total,
    inadmissible ones cost 0, so the assignment first maximises the pair count.
    """
    M = check_distance_matrix(M)
    thr = _dis_thr(cfg)
    n, m = M.shape
    allowed = M <= thr
    pairs = []
    if n and m and allowed.any():
        big = float(M[allowed].sum()) + 1.0
        cost = np.where(allowed, M - big, 0.0)
        for i, j in hungarian(cost):
            if allowed[i, j]:
                pairs.append((i, j, float(M[i, j])))
        pairs.sort(key=lambda p: (p[2], p[0], p[1]))
    used_r = {p[0] for p in pairs}
    used_c = {p[1] for p in pairs}
    return MatchResult(pairs, [i for i in range(n) if i not in used_r],
                       [j for j in range(m) if j not in used_c])


def match_matrix(M, cfg: AssociationConfig = AssociationConfig()) -> MatchResult:
    return optimal_match(M, cfg) if cfg.mode == "optimal" else greedy_match(M, cfg)


def _embed(dets: Sequence[Detection2D], encoder) -> np.ndarray:
    X = check_embeddings([d.embedding for d in dets])
    if encoder is None or len(dets) == 0:
        return X
    return encoder.transform(X)


def match_frame(rig: CameraRig, frame: Frame, cfg: AssociationConfig = AssociationConfig(),
                encoder=None, rng: DetectionRange = DetectionRange()) -> MatchResult:
    """Associate detections across every adjacent camera pair of the rig.

    Pairs are processed in rig order; a detection consumed by an earlier pair
    is not offered to later ones.
    """
    result = MatchResult()
    consumed: set[DetectionRef] = set()
    candidates = []
    for pair in rig.adjacency:
        list_a, list_b = overlap_candidates(rig, frame, pair, cfg, rng)
        candidates.append((list_a, list_b))
        list_a = [r for r in list_a if r not in consumed]
        list_b = [r for r in list_b if r not in consumed]
        if not list_a or not list_b:
            continue
        dets_a = [frame.detections[c][i] for c, i in list_a]
        dets_b = [frame.detections[c][i] for c, i in list_b]
        M = pairwise_distances(_embed(dets_a, encoder), _embed(dets_b, encoder))
        for i, j, d in match_matrix(M, cfg).pairs:
            result.pairs.append((list_a[i], list_b[j], d))
            consumed.update((list_a[i], list_b[j]))
    seen = set(consumed)
    for list_a, list_b in candidates:
        for refs, bucket in ((list_a, result.unmatched_a), (list_b, result.unmatched_b)):
            for ref in refs:
                if ref not in seen:
                    seen.add(ref)
                    bucket.append(ref)
    return result


# --------------------------------------------------------------------------- scoring

@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "MatchCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 1.0


def true_duplicate_pairs(rig: CameraRig, frame: Frame, cfg: AssociationConfig = AssociationConfig(),
                         rng: DetectionRange = DetectionRange()) -> set[frozenset]:
    """Candidate pairs that share a ground-truth instance id."""
    truth = set()
    for pair in rig.adjacency:
        list_a, list_b = overlap_candidates(rig, frame, pair, cfg, rng)
        for ra in list_a:
            ia = frame.detections[ra[0]][ra[1]].instance_id
            for rb in list_b:
                if ia is not None and ia == frame.detections[rb[0]][rb[1]].instance_id:
                    truth.add(frozenset((ra, rb)))
    return truth


def score_matches(rig: CameraRig, frame: Frame, result: MatchResult,
                  cfg: AssociationConfig = AssociationConfig(),
                  rng: DetectionRange = DetectionRange()) -> MatchCounts:
    truth = true_duplicate_pairs(rig, frame, cfg, rng)
    predicted = {frozenset((a, b)) for a, b, _ in result.pairs}
    return MatchCounts(tp=len(predicted & truth), fp=len(predicted - truth),
                       fn=len(truth - predicted))


def calibrate_threshold(scenes: Iterable[Scene], encoder=None, grid=None,
                        mode: str = "greedy", classes=frozenset({CAR}),
                        rng: DetectionRange = DetectionRange()) -> tuple[float, float]:
    """Sweep ``dis_thr`` over ``grid`` and return ``(best_thr, best_f1)``.

    Ties in F1 go to the threshold closest to the default 2.0.
    """
    grid = np.linspace(0.25, 6.0, 24) if grid is None else np.asarray(grid, dtype=float)
    scenes = list(scenes)
    best = (-1.0, 0.0)
    for thr in grid:
        cfg = AssociationConfig(dis_thr=float(thr), mode=mode, classes=classes)
        counts = MatchCounts()
        for scene in scenes:
            for frame in scene.frames:
                counts += score_matches(scene.rig, frame,
                                        match_frame(scene.rig, frame, cfg, encoder, rng), cfg, rng)
        key = (counts.f1, -abs(thr - 2.0))
        if key > (best[0], -abs(best[1] - 2.0)):
            best = (counts.f1, float(thr))
    return best[1], best[0]


class SiameseMatcher(BaseEstimator):
    """Embedding-distance matcher for detections of adjacent cameras.

    Parameters
    ----------
    dis_thr : float or "auto"
        Maximum embedding distance of an accepted pair.  ``"auto"`` calibrates
        the threshold in :meth:`fit` by maximising match F1 on labelled scenes.
    mode : {"greedy", "optimal"}
    classes : iterable of int or None
        Classes taking part in association; ``None`` means all.
    encoder : object with ``transform`` or None
        Maps raw detection features to embeddings.  ``None`` uses the stored
        vectors as embeddings.
    d_max : float
        Detection range used for frustum construction.
    """

    def __init__(self, dis_thr=2.0, mode="greedy", classes=(CAR,), encoder=None, d_max=50.0):
        self.dis_thr = dis_thr
        self.mode = mode
        self.classes = classes
        self.encoder = encoder
        self.d_max = d_max

    def _config(self, thr) -> AssociationConfig:
        classes = None if self.classes is None else frozenset(self.classes)
        return AssociationConfig(dis_thr=thr, mode=self.mode, classes=classes)

    def fit(self, scenes=None, y=None):
        if self.dis_thr == "auto":
            if scenes is None:
                raise ValidationError("dis_thr='auto' needs labelled scenes to calibrate on")
            self.threshold_, self.calibration_f1_ = calibrate_threshold(
                scenes, self.encoder, mode=self.mode, classes=self._config(0.0).classes,
                rng=DetectionRange(self.d_max))
        else:
            self.threshold_ = float(self.dis_thr)
        self.config_ = self._config(self.threshold_)
        return self

    def predict(self, rig: CameraRig, frame: Frame) -> MatchResult:
        check_is_fitted(self, "config_")
        return match_frame(rig, frame, self.config_, self.encoder, DetectionRange(self.d_max))

    def score(self, scenes, y=None) -> float:
        """Match F1 against ground-truth instance ids."""
        check_is_fitted(self, "config_")
        counts = MatchCounts()
        rng = DetectionRange(self.d_max)
        for scene in scenes:
            for frame in scene.frames:
                counts += score_matches(scene.rig, frame, self.predict(scene.rig, frame),
                                        self.config_, rng)
        return counts.f1
