"""Cross-camera duplicate suppression for frustum-based 3D detection.

Duplicates of one object seen by two adjacent cameras are re-identified by
embedding distance and fused into a single LiDAR frustum fit instead of being
removed by geometric non-maximum suppression.
"""

from .association import (AssociationConfig, MatchResult, SiameseMatcher, greedy_match,
                          match_frame, optimal_match)
from .boxfit import FitConfig, FrustumBoxFitter, fit_box, min_area_rect_bev
from .contrastive import LossConfig, SiameseEncoder, ToyEncoder, embedding_loss
from .exceptions import (ConfigError, SceneFormatError, SianmsError, ValidationError)
from .geometry import DetectionRange, Frustum, Ray, frustum_from_bbox, pair_axis
from .metrics import EvalConfig, EvalReport, evaluate
from .pipeline import (BenchmarkConfig, DetectionPipeline, PipelineConfig, run_benchmark,
                       run_pipeline)
from .scene import (Box3D, Camera, CameraRig, Detection2D, Frame, GroundTruthObject, Scene,
                    load_scene, save_scene)
from .simulator import SimConfig, generate_frame, generate_rig, generate_scene
from .suppression import BEVNonMaxSuppression, NmsConfig, greedy_nms

__version__ = "0.1.0"

__all__ = [
    "AssociationConfig", "BEVNonMaxSuppression", "BenchmarkConfig", "Box3D", "Camera",
    "CameraRig", "ConfigError", "Detection2D", "DetectionPipeline", "DetectionRange",
    "EvalConfig", "EvalReport", "FitConfig", "Frame", "Frustum", "FrustumBoxFitter",
    "GroundTruthObject", "LossConfig", "MatchResult", "NmsConfig", "PipelineConfig", "Ray",
    "Scene", "SceneFormatError", "SianmsError", "SiameseEncoder", "SiameseMatcher",
    "SimConfig", "ToyEncoder", "ValidationError", "embedding_loss", "evaluate", "fit_box",
    "frustum_from_bbox", "generate_frame", "generate_rig", "generate_scene", "greedy_match",
    "greedy_nms", "load_scene", "match_frame", "min_area_rect_bev", "optimal_match",
    "pair_axis", "run_benchmark", "run_pipeline", "save_scene",
]
