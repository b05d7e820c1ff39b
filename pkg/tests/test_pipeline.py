import json

import numpy as np
import pytest
from sklearn.preprocessing import FunctionTransformer

from oracles import monte_carlo_iou
from sianms.exceptions import ConfigError, SceneFormatError
from sianms.pipeline import (VARIANTS, BenchmarkConfig, DetectionPipeline, PipelineConfig,
                             align_to_scene, detections_from_dict, detections_to_dict,
                             load_detections, report_table, run_benchmark, run_frame,
                             run_pipeline, save_detections, training_seeds)
from sianms.simulator import SimConfig, generate_scene, straddling_scene

PERFECT = SimConfig(embedding_sigma=0.0, view_drift=0.0)


@pytest.fixture(scope="module")
def identity():
    # raw simulator features used directly as embeddings
    return FunctionTransformer().fit(np.zeros((1, 16)))


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SimConfig(n_frames=12, seed=21))


def aabb_rect(box):
    fp = box.footprint()
    lo, hi = fp.min(axis=0), fp.max(axis=0)
    c = (lo + hi) / 2
    return (c[0], c[1], hi[1] - lo[1], hi[0] - lo[0], 0.0)


def test_one_duplicate_becomes_one_box(identity):
    sc = straddling_scene(PERFECT, seed=0)
    frame = sc.frames[0]
    assert sum(len(v) for v in frame.detections.values()) == 2
    vanilla, _ = run_frame(sc.rig, frame, PipelineConfig("vanilla"))
    sia, log = run_frame(sc.rig, frame, PipelineConfig("sianms"), identity)
    assert len(vanilla) == 2 and len(sia) == 1
    assert log.matches == 1


def test_low_iou_duplicate_survives_nms_but_not_sianms(identity):
    sc = straddling_scene(PERFECT, seed=26)
    frame = sc.frames[0]
    vanilla, _ = run_frame(sc.rig, frame, PipelineConfig("vanilla"))
    assert len(vanilla) == 2
    iou = monte_carlo_iou(aabb_rect(vanilla[0]), aabb_rect(vanilla[1]), n=400_000)
    assert 0.15 < iou < 0.25
    nms, _ = run_frame(sc.rig, frame, PipelineConfig("axis_nms"))
    sia, _ = run_frame(sc.rig, frame, PipelineConfig("sianms"), identity)
    assert len(nms) == 2 and len(sia) == 1


def test_single_camera_object_identical_across_variants(identity):
    cfg = SimConfig(n_frames=1, objects_per_frame=(1, 1), dropout=0.0)
    found = 0
    for seed in range(30):
        sc = generate_scene(cfg.replace(seed=seed))
        frame = sc.frames[0]
        if len(frame.ground_truth) != 1 or len(frame.ground_truth[0].visible_in) != 1:
            continue
        outs = [run_frame(sc.rig, frame, PipelineConfig(v), identity)[0] for v in VARIANTS]
        assert all(o == outs[0] for o in outs)
        found += 1
    assert found >= 3


def test_variant_relations(scene, identity):
    vanilla, _ = run_pipeline(scene, PipelineConfig("vanilla"))
    nms, _ = run_pipeline(scene, PipelineConfig("axis_nms"))
    sia, _ = run_pipeline(scene, PipelineConfig("sianms"), identity)
    hyb, _ = run_pipeline(scene, PipelineConfig("hybrid"), identity)
    for v, n, s, h in zip(vanilla, nms, sia, hyb):
        assert set(n) <= set(v)
        assert set(h) <= set(s)
        assert len(s) <= len(v)


def test_missing_encoder_is_a_config_error(scene):
    with pytest.raises(ConfigError):
        run_pipeline(scene, PipelineConfig("sianms"))
    with pytest.raises(ConfigError):
        DetectionPipeline("hybrid").fit()
    with pytest.raises(ConfigError):
        PipelineConfig("soft_nms")


def test_threads_do_not_change_output(scene, identity):
    a, la = run_pipeline(scene, PipelineConfig("hybrid"), identity, threads=1)
    b, lb = run_pipeline(scene, PipelineConfig("hybrid"), identity, threads=4)
    assert a == b
    assert [x.to_dict() for x in la] == [x.to_dict() for x in lb]


def test_detections_roundtrip(tmp_path, scene):
    boxes, logs = run_pipeline(scene, PipelineConfig("vanilla"))
    ids = [f.frame_id for f in scene.frames]
    path = tmp_path / "d.json"
    save_detections(path, boxes, ids, "vanilla", logs)
    got_ids, got = load_detections(path)
    assert got_ids == ids and got == boxes
    assert align_to_scene(scene, got_ids[::-1], got[::-1]) == boxes
    with pytest.raises(SceneFormatError):
        align_to_scene(scene, [999], [[]])
    d = detections_to_dict(boxes, ids, "vanilla")
    d["frames"][0]["boxes"][0]["size"] = [1, 2]
    with pytest.raises(SceneFormatError, match=r"frames\[0\]"):
        detections_from_dict(json.loads(json.dumps(d)))
    with pytest.raises(SceneFormatError):
        detections_from_dict({"kind": "other"})


def test_detections_match_schema(scene):
    jsonschema = pytest.importorskip("jsonschema")
    from importlib.resources import files
    schema = json.loads(files("sianms").joinpath("schemas/detections.schema.json").read_text())
    boxes, logs = run_pipeline(scene, PipelineConfig("vanilla"))
    d = detections_to_dict(boxes, [f.frame_id for f in scene.frames], "vanilla", logs)
    jsonschema.validate(json.loads(json.dumps(d)), schema)


def test_single_variant_benchmark(scene):
    res = run_benchmark(scene, None, BenchmarkConfig(variants=("vanilla",)))
    assert list(res["variants"]) == ["vanilla"]
    assert set(res["variants"]["vanilla"]) == {"All", "Overlap"}
    table = report_table(res)
    assert "vanilla" in table and "Overlap" in table
    json.dumps(res, allow_nan=False)


def test_training_seeds_avoid_test_seed():
    cfg = BenchmarkConfig(seed=3, train_scenes=4)
    assert cfg.seed not in training_seeds(cfg)
    assert len(set(training_seeds(cfg))) == 4


def test_estimator_facade(scene, identity):
    est = DetectionPipeline("sianms", encoder=identity)
    assert est.get_params()["variant"] == "sianms"
    assert est.fit().predict(scene) == run_pipeline(scene, PipelineConfig("sianms"), identity)[0]
    assert 0.0 <= est.score(scene) <= 100.0
