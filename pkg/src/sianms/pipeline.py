"""End-to-end detection variants, evaluation runs and the benchmark table.

Variants
--------
``vanilla``   one frustum fit per 2D detection, duplicates kept.
``axis_nms``  vanilla followed by BEV non-maximum suppression.
``sianms``    duplicates across adjacent cameras are re-identified by embedding
              distance and fitted once from the union of both frustums.
``hybrid``    sianms followed by BEV non-maximum suppression.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .association import AssociationConfig, match_frame
from .boxfit import FitConfig, fit_box_or_raise
from .contrastive import SiameseEncoder
from .exceptions import (ConfigError, DegenerateAxisError, DegenerateFitError, EmptyFitError,
                         OverlapError, SceneFormatError)
from .geometry import (DetectionRange, aggregate_frustum_points, frustum_from_bbox, frustum_mask,
                       pair_axis, single_axis)
from .metrics import EvalConfig, EvalReport, evaluate
from .scene import (FORMAT_VERSION, Box3D, CameraRig, Frame, Scene, box_from_dict, box_to_dict,
                    read_json, write_json)
from .simulator import SimConfig, generate_scene
from .suppression import NmsConfig, greedy_nms

log = logging.getLogger(__name__)

VARIANTS = ("vanilla", "axis_nms", "sianms", "hybrid")
REGIONS = (("All", "all"), ("Overlap", "overlap_only"))


@dataclass(frozen=True)
class PipelineConfig:
    variant: str = "sianms"
    d_max: float = 50.0
    fit: FitConfig = FitConfig()
    nms: NmsConfig = NmsConfig()
    association: AssociationConfig = AssociationConfig()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if not self.d_max > 0:
            raise ConfigError("d_max must be positive")

    @property
    def needs_encoder(self) -> bool:
        return self.variant in ("sianms", "hybrid")


@dataclass
class RunLog:
    """Per-frame bookkeeping of what the pipeline did."""

    frame_id: int
    fits: int = 0
    failed_fits: list[dict] = field(default_factory=list)
    matches: int = 0
    dismissed: list[dict] = field(default_factory=list)
    suppressed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _single_view(rig, frame, ref, cfg, rng, runlog) -> Box3D | None:
    cam_id, i = ref
    cam = rig.camera(cam_id)
    det = frame.detections[cam_id][i]
    f = frustum_from_bbox(cam, det.bbox, rng)
    pts = frame.lidar[frustum_mask(f, frame.lidar)]
    try:
        box = fit_box_or_raise(pts, single_axis(cam, det.bbox), cfg.fit, det.class_id, det.score)
    except (EmptyFitError, DegenerateFitError) as exc:
        runlog.failed_fits.append({"detections": [list(ref)], "reason": exc.category})
        return None
    runlog.fits += 1
    return box


def _pair_view(rig, frame, ref_a, ref_b, cfg, rng, runlog):
    """Fit one box from both frustums.  Returns the box, ``None`` on a failed
    fit, or raises :class:`OverlapError` when the match must be dismissed."""
    dets = [frame.detections[c][i] for c, i in (ref_a, ref_b)]
    fr = [frustum_from_bbox(rig.camera(c), d.bbox, rng) for (c, _), d in zip((ref_a, ref_b), dets)]
    pts = aggregate_frustum_points(fr[0], fr[1], frame.lidar)
    try:
        axis = pair_axis(fr[0], fr[1], rng)
    except DegenerateAxisError as exc:
        raise OverlapError(str(exc)) from exc
    lead = max(dets, key=lambda d: d.score)
    try:
        box = fit_box_or_raise(pts, axis, cfg.fit, lead.class_id, lead.score)
    except (EmptyFitError, DegenerateFitError) as exc:
        runlog.failed_fits.append({"detections": [list(ref_a), list(ref_b)], "reason": exc.category})
        return None
    runlog.fits += 1
    return box


def _suppress(boxes: list[Box3D], cfg: PipelineConfig, runlog: RunLog) -> list[Box3D]:
    keep = greedy_nms(boxes, cfg.nms)
    runlog.suppressed += len(boxes) - len(keep)
    return [boxes[k] for k in keep]


def run_frame(rig: CameraRig, frame: Frame, cfg: PipelineConfig = PipelineConfig(),
              encoder=None) -> tuple[list[Box3D], RunLog]:
    """Global-frame boxes for one frame plus its run log."""
    if cfg.needs_encoder and encoder is None:
        raise ConfigError(f"variant {cfg.variant!r} needs a trained embedding encoder")
    rng = DetectionRange(cfg.d_max)
    runlog = RunLog(frame.frame_id)
    refs = [(c, i) for c in rig.ids for i in range(len(frame.detections.get(c, ())))]
    boxes: list[Box3D] = []
    if cfg.variant in ("vanilla", "axis_nms"):
        for ref in refs:
            box = _single_view(rig, frame, ref, cfg, rng, runlog)
            if box is not None:
                boxes.append(box)
    else:
        result = match_frame(rig, frame, cfg.association, encoder, rng)
        paired = set()
        for ref_a, ref_b, dist in result.pairs:
            try:
                box = _pair_view(rig, frame, ref_a, ref_b, cfg, rng, runlog)
            except OverlapError as exc:
                runlog.dismissed.append({"pair": [list(ref_a), list(ref_b)],
                                         "distance": dist, "reason": str(exc)})
                log.debug("frame %s: dismissed match %s-%s: %s", frame.frame_id, ref_a, ref_b, exc)
                continue
            runlog.matches += 1
            paired.update((ref_a, ref_b))
            if box is not None:
                boxes.append(box)
        for ref in refs:
            if ref not in paired:
                box = _single_view(rig, frame, ref, cfg, rng, runlog)
                if box is not None:
                    boxes.append(box)
    if cfg.variant in ("axis_nms", "hybrid"):
        boxes = _suppress(boxes, cfg, runlog)
    return boxes, runlog


def _map(fn, items, threads: int):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_pipeline(scene: Scene, cfg: PipelineConfig = PipelineConfig(), encoder=None,
                 threads: int = 1) -> tuple[list[list[Box3D]], list[RunLog]]:
    """Run one variant over every frame; output order follows the frames."""
    if cfg.needs_encoder and encoder is None:
        raise ConfigError(f"variant {cfg.variant!r} needs a trained embedding encoder")
    out = _map(lambda f: run_frame(scene.rig, f, cfg, encoder), scene.frames, threads)
    return [b for b, _ in out], [r for _, r in out]


def ground_truth_boxes(scene: Scene) -> list[list[Box3D]]:
    return [[g.box for g in f.ground_truth] for f in scene.frames]


def evaluate_scene(scene: Scene, frames_boxes, region: str = "all",
                   cfg: EvalConfig = EvalConfig()) -> EvalReport:
    return evaluate(frames_boxes, ground_truth_boxes(scene), scene.rig, replace(cfg, region=region))


class DetectionPipeline(BaseEstimator):
    """Estimator facade over :func:`run_pipeline`.

    ``predict(scene)`` returns per-frame box lists; ``score(scene)`` is the
    all-region class-mean AP in percent.
    """

    def __init__(self, variant="sianms", encoder=None, dis_thr=2.0, match_mode="greedy",
                 iou_thr=0.3, nms_mode="axis_aligned", d_max=50.0, threads=1):
        self.variant = variant
        self.encoder = encoder
        self.dis_thr = dis_thr
        self.match_mode = match_mode
        self.iou_thr = iou_thr
        self.nms_mode = nms_mode
        self.d_max = d_max
        self.threads = threads

    def _config(self) -> PipelineConfig:
        return PipelineConfig(variant=self.variant, d_max=self.d_max,
                              nms=NmsConfig(iou_thr=self.iou_thr, mode=self.nms_mode),
                              association=AssociationConfig(dis_thr=self.dis_thr,
                                                            mode=self.match_mode))

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        if self.config_.needs_encoder and self.encoder is None:
            raise ConfigError(f"variant {self.variant!r} needs a trained embedding encoder")
        return self

    def predict(self, scene: Scene) -> list[list[Box3D]]:
        cfg = getattr(self, "config_", None) or self._config()
        boxes, self.run_logs_ = run_pipeline(scene, cfg, self.encoder, self.threads)
        return boxes

    def score(self, scene: Scene, y=None) -> float:
        report = evaluate_scene(scene, self.predict(scene), "all", EvalConfig(d_max=self.d_max))
        aps = [m.ap for m in report.per_class.values() if m.ap is not None]
        return float(np.mean(aps)) if aps else 0.0


# --------------------------------------------------------------------------- detection files

def detections_to_dict(frames_boxes, frame_ids, variant: str, logs: Sequence[RunLog] = ()) -> dict:
    out = {"kind": "sianms-detections", "format_version": FORMAT_VERSION, "variant": variant,
           "frames": [{"frame_id": fid, "boxes": [box_to_dict(b) for b in boxes]}
                      for fid, boxes in zip(frame_ids, frames_boxes)]}
    if logs:
        out["run_log"] = [r.to_dict() for r in logs]
    return out


def detections_from_dict(d: dict) -> tuple[list[int], list[list[Box3D]]]:
    if not isinstance(d, dict) or d.get("kind") != "sianms-detections":
        raise SceneFormatError("$: not a detections file (kind != 'sianms-detections')")
    if d.get("format_version") != FORMAT_VERSION:
        raise SceneFormatError(f"$.format_version: unsupported {d.get('format_version')!r}")
    frames = d.get("frames")
    if not isinstance(frames, list):
        raise SceneFormatError("$.frames: expected a list")
    ids, boxes = [], []
    for k, f in enumerate(frames):
        if not isinstance(f, dict) or "frame_id" not in f or not isinstance(f.get("boxes"), list):
            raise SceneFormatError(f"$.frames[{k}]: expected frame_id and a boxes list")
        ids.append(f["frame_id"])
        boxes.append([box_from_dict(b, f"$.frames[{k}].boxes[{j}]") for j, b in enumerate(f["boxes"])])
    return ids, boxes


def save_detections(path, frames_boxes, frame_ids, variant, logs=()) -> None:
    write_json(detections_to_dict(frames_boxes, frame_ids, variant, logs), path)


def load_detections(path):
    return detections_from_dict(read_json(path))


def align_to_scene(scene: Scene, frame_ids, frames_boxes) -> list[list[Box3D]]:
    """Order detection frames like the scene; unknown ids are a format error."""
    by_id = dict(zip(frame_ids, frames_boxes))
    unknown = set(by_id) - {f.frame_id for f in scene.frames}
    if unknown:
        raise SceneFormatError(f"detections reference unknown frames {sorted(unknown)[:5]}")
    return [by_id.get(f.frame_id, []) for f in scene.frames]


# --------------------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    n_frames: int = 200
    train_scenes: int = 3
    train_frames: int = 40
    variants: tuple[str, ...] = VARIANTS
    encoder: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        if self.n_frames < 1 or self.train_scenes < 1 or self.train_frames < 1:
            raise ConfigError("benchmark frame and scene counts must be positive")


def _fmt(v, digits=2) -> str:
    return "-" if v is None else f"{v:.{digits}f}"


def report_table(results: dict) -> str:
    """Fixed-width text table of a benchmark result dictionary."""
    head = ["variant", "region", "class", "AP", "ATE", "ASE", "AOE", "TP", "FP", "FN"]
    rows = [head]
    for variant, regions in results["variants"].items():
        for region, per_class in regions.items():
            for cls, m in per_class.items():
                rows.append([variant, region, cls, _fmt(m["ap"]), _fmt(m["ate"], 3),
                             _fmt(m["ase"]), _fmt(m["aoe"], 3), str(m["tp"]), str(m["fp"]),
                             str(m["fn"])])
    widths = [max(len(r[k]) for r in rows) for k in range(len(head))]
    lines = ["  ".join(c.ljust(w) if k < 3 else c.rjust(w) for k, (c, w) in
                       enumerate(zip(r, widths))) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def run_benchmark(scene: Scene, encoder, cfg: BenchmarkConfig = BenchmarkConfig(),
                  pipeline: PipelineConfig = PipelineConfig(),
                  eval_cfg: EvalConfig = EvalConfig(), threads: int = 1) -> dict:
    """Evaluate every variant on ``scene`` over the whole range and the overlap wedges."""
    results = {"kind": "sianms-benchmark", "format_version": FORMAT_VERSION,
               "seed": cfg.seed, "n_frames": len(scene.frames), "variants": {}, "runs": {}}
    for variant in cfg.variants:
        pcfg = replace(pipeline, variant=variant)
        boxes, logs = run_pipeline(scene, pcfg, encoder if pcfg.needs_encoder else None, threads)
        results["variants"][variant] = {
            name: {str(k): v for k, v in evaluate_scene(scene, boxes, region, eval_cfg).to_dict().items()}
            for name, region in REGIONS}
        results["runs"][variant] = {
            "boxes": sum(len(b) for b in boxes),
            "fits": sum(r.fits for r in logs),
            "failed_fits": sum(len(r.failed_fits) for r in logs),
            "matches": sum(r.matches for r in logs),
            "dismissed": sum(len(r.dismissed) for r in logs),
            "suppressed": sum(r.suppressed for r in logs),
        }
    return _finite(results)


def _finite(obj):
    """Replace non-finite floats so reports stay valid JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def training_seeds(cfg: BenchmarkConfig) -> list[int]:
    """Seeds of the encoder training scenes, disjoint from the test seed."""
    return [cfg.seed * 1000 + 1 + k for k in range(cfg.train_scenes)]


def benchmark_inputs(cfg: BenchmarkConfig = BenchmarkConfig(), sim=None, encoder=None):
    """Simulate the test scene and, unless given, train an encoder on separate scenes.

    Returns ``(scene, encoder)``.
    """
    sim = sim or SimConfig()
    scene = generate_scene(sim.replace(n_frames=cfg.n_frames, seed=cfg.seed))
    if encoder is None and any(v in ("sianms", "hybrid") for v in cfg.variants):
        train = [generate_scene(sim.replace(n_frames=cfg.train_frames, seed=s))
                 for s in training_seeds(cfg)]
        params = {"random_state": cfg.seed, **cfg.encoder}
        encoder = SiameseEncoder(**params).fit(train)
    return scene, encoder
