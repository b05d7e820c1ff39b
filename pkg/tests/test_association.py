import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import exhaustive_assignment, greedy_reference
from sianms.association import (AssociationConfig, SiameseMatcher, calibrate_threshold,
                                greedy_match, match_frame, optimal_match, overlap_candidates,
                                pairwise_distances, score_matches, true_duplicate_pairs)
from sianms.exceptions import NotAdjacentError, ValidationError
from sianms.scene import Camera, CameraRig, Detection2D, Frame
from sianms.simulator import SimConfig, generate_scene

G1 = AssociationConfig(dis_thr=1.0)

matrices = st.integers(1, 6).flatmap(
    lambda n: st.integers(1, 6).flatmap(
        lambda m: arrays(np.float64, (n, m), elements=st.floats(0, 3, allow_nan=False))))


def pair_set(res):
    return {(i, j) for i, j, _ in res.pairs}


# ----------------------------------------------------------------------------- distances

def test_distance_examples():
    assert pairwise_distances([[1.0, 2.0]], [[1.0, 2.0]])[0, 0] == 0.0
    assert pairwise_distances([[0.0, 0.0]], [[3.0, 4.0]])[0, 0] == pytest.approx(5.0)


def test_distance_swap_is_transpose():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
    assert np.allclose(pairwise_distances(a, b).T, pairwise_distances(b, a))


def test_distance_errors():
    with pytest.raises(ValidationError):
        pairwise_distances([[0.0, 1.0]], [[0.0, 1.0, 2.0]])
    with pytest.raises(ValidationError):
        pairwise_distances([None], [[0.0]])


# ----------------------------------------------------------------------------- greedy

def test_greedy_examples():
    res = greedy_match([[0.2, 0.9], [0.5, 0.4]], G1)
    assert res.pairs == [(0, 0, 0.2), (1, 1, 0.4)]
    res = greedy_match([[0.3, 0.35], [0.4, 10.0]], G1)
    assert res.pairs == [(0, 0, 0.3)]
    assert res.unmatched_a == [1] and res.unmatched_b == [1]


def test_greedy_all_filtered():
    res = greedy_match(np.full((2, 3), 5.0), G1)
    assert res.pairs == [] and res.unmatched_a == [0, 1] and res.unmatched_b == [0, 1, 2]


def test_greedy_tie_break_by_row_then_col():
    res = greedy_match([[0.5, 0.5], [0.5, 0.5]], G1)
    assert res.pairs == [(0, 0, 0.5), (1, 1, 0.5)]


@settings(max_examples=300, deadline=None)
@given(matrices, st.floats(0, 3))
def test_greedy_matches_reference(M, thr):
    res = greedy_match(M, thr)
    assert res.pairs == greedy_reference(M, thr)
    rows = [p[0] for p in res.pairs]
    cols = [p[1] for p in res.pairs]
    assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
    assert all(d <= thr for *_, d in res.pairs)


def test_greedy_permutation_equivariant():
    rng = np.random.default_rng(1)
    for _ in range(200):
        M = rng.uniform(0, 2, (5, 4))
        pr, pc = rng.permutation(5), rng.permutation(4)
        base = pair_set(greedy_match(M, G1))
        perm = pair_set(greedy_match(M[pr][:, pc], G1))
        assert {(int(pr[i]), int(pc[j])) for i, j in perm} == base


def test_scale_invariance_of_decisions():
    rng = np.random.default_rng(2)
    for _ in range(100):
        a, b = rng.normal(size=(5, 6)), rng.normal(size=(4, 6))
        c = rng.uniform(0.1, 10)
        for fn in (greedy_match, optimal_match):
            r1 = fn(pairwise_distances(a, b), 3.0)
            r2 = fn(pairwise_distances(c * a, c * b), 3.0 * c)
            assert pair_set(r1) == pair_set(r2)


# ----------------------------------------------------------------------------- optimal

def test_optimal_examples():
    assert optimal_match([[0.5]], G1).pairs == [(0, 0, 0.5)]
    res = optimal_match([[1.0, 0.2], [0.3, 1.1]], AssociationConfig(dis_thr=2.0))
    assert pair_set(res) == {(0, 1), (1, 0)}
    assert sum(d for *_, d in res.pairs) == pytest.approx(0.5)
    assert pair_set(greedy_match([[1.0, 0.2], [0.3, 1.1]], 2.0)) == pair_set(res)


def test_optimal_beats_greedy_on_count():
    M = [[0.1, 0.2], [0.3, 5.0]]
    assert len(greedy_match(M, 1.0).pairs) == 1
    assert pair_set(optimal_match(M, 1.0)) == {(0, 1), (1, 0)}


def test_optimal_equals_exhaustive_on_random_6x6():
    rng = np.random.default_rng(3)
    for _ in range(60):
        M = rng.uniform(0, 2, (6, 6))
        thr = rng.uniform(0.2, 2.0)
        count, best, pairs = exhaustive_assignment(M, thr)
        opt = optimal_match(M, thr)
        greedy = greedy_match(M, thr)
        got = sum(d for *_, d in opt.pairs)
        assert len(opt.pairs) == count
        assert got == pytest.approx(best, abs=1e-9)
        if len(greedy.pairs) == count:
            assert got <= sum(d for *_, d in greedy.pairs) + 1e-12


@settings(max_examples=150, deadline=None)
@given(matrices, st.floats(0, 3))
def test_optimal_matches_exhaustive_rectangular(M, thr):
    count, best, _ = exhaustive_assignment(M, thr)
    res = optimal_match(M, thr)
    assert len(res.pairs) == count
    assert sum(d for *_, d in res.pairs) == pytest.approx(best, abs=1e-9)
    assert all(d <= thr for *_, d in res.pairs)


def test_config_invariants():
    with pytest.raises(ValidationError):
        AssociationConfig(dis_thr=-1.0)
    with pytest.raises(ValidationError):
        AssociationConfig(mode="auction")


# ----------------------------------------------------------------------------- candidates

def two_camera_frame():
    a = Camera.from_hfov(0, math.radians(70), yaw=0.0)
    b = Camera.from_hfov(1, math.radians(70), yaw=math.radians(60))
    rig = CameraRig((a, b))
    emb = np.zeros(4)
    centre = Detection2D(0, (700, 400, 900, 500), 0.9, embedding=emb)
    edge = Detection2D(0, (1450, 400, 1600, 500), 0.9, embedding=emb, truncated_right=True)
    other = Detection2D(1, (0, 400, 150, 500), 0.9, embedding=emb, truncated_left=True)
    return rig, Frame(0, {0: (centre, edge), 1: (other,)})


def test_candidates_exclusive_vs_shared_edge():
    rig, frame = two_camera_frame()
    list_a, list_b = overlap_candidates(rig, frame, (0, 1))
    assert list_a == [(0, 1)]
    assert list_b == [(1, 0)]


def test_candidates_non_adjacent():
    scene = generate_scene(SimConfig(n_frames=1, seed=3))
    with pytest.raises(NotAdjacentError):
        overlap_candidates(scene.rig, scene.frames[0], (0, 3))


def _bearing_bounds(cam, bbox):
    return (cam.yaw + math.atan((bbox[0] - cam.cx) / cam.fx),
            cam.yaw + math.atan((bbox[2] - cam.cx) / cam.fx))


def _overlaps(lo1, hi1, lo2, hi2):
    # shift the second interval by whole turns and test closed overlap
    for k in (-1, 0, 1):
        s = 2 * math.pi * k
        if lo1 <= hi2 + s and lo2 + s <= hi1:
            return True
    return False


def test_candidates_match_brute_force():
    scene = generate_scene(SimConfig(n_frames=5, seed=11))
    rig = scene.rig
    total = 0
    for frame in scene.frames:
        for a, b in rig.adjacency:
            got = overlap_candidates(rig, frame, (a, b))
            for mine, other, refs in ((a, b, got[0]), (b, a, got[1])):
                oc = rig.camera(other)
                expect = []
                for i, det in enumerate(frame.detections.get(mine, ())):
                    lo, hi = _bearing_bounds(rig.camera(mine), det.bbox)
                    if _overlaps(lo, hi, oc.yaw - oc.hfov / 2, oc.yaw + oc.hfov / 2):
                        expect.append((mine, i))
                assert refs == expect
                total += len(refs)
    assert total > 0


# ----------------------------------------------------------------------------- frames

def test_match_frame_one_to_one_and_sound():
    scene = generate_scene(SimConfig(n_frames=10, seed=4))
    cfg = AssociationConfig()
    for frame in scene.frames:
        res = match_frame(scene.rig, frame, cfg)
        refs = [r for a, b, _ in res.pairs for r in (a, b)]
        assert len(refs) == len(set(refs))
        assert all(d <= cfg.dis_thr for *_, d in res.pairs)
        assert not set(refs) & set(res.unmatched)


def test_match_frame_raw_features_recover_duplicates():
    scene = generate_scene(SimConfig(n_frames=10, seed=5))
    f1 = []
    for frame in scene.frames:
        counts = score_matches(scene.rig, frame, match_frame(scene.rig, frame))
        f1.append(counts)
    tp = sum(c.tp for c in f1)
    assert tp > 0
    assert tp / (tp + sum(c.fp + c.fn for c in f1)) > 0.5


def test_true_pairs_share_instance():
    scene = generate_scene(SimConfig(n_frames=3, seed=6))
    frame = scene.frames[0]
    for pair in true_duplicate_pairs(scene.rig, frame):
        a, b = sorted(pair)
        assert frame.detections[a[0]][a[1]].instance_id == frame.detections[b[0]][b[1]].instance_id
        assert a[0] != b[0]


def test_calibration_prefers_default_on_ties_and_returns_grid_value():
    scenes = [generate_scene(SimConfig(n_frames=4, seed=7))]
    thr, f1 = calibrate_threshold(scenes, grid=[0.5, 1.0, 2.0, 3.0])
    assert thr in (0.5, 1.0, 2.0, 3.0)
    assert 0.0 <= f1 <= 1.0
    thr0, f0 = calibrate_threshold(scenes, grid=[0.0])
    assert f0 <= f1


def test_matcher_estimator():
    scenes = [generate_scene(SimConfig(n_frames=3, seed=8))]
    m = SiameseMatcher(dis_thr="auto")
    assert m.get_params()["dis_thr"] == "auto"
    m.fit(scenes)
    assert m.threshold_ > 0
    assert m.score(scenes) == pytest.approx(m.calibration_f1_)
    with pytest.raises(ValidationError):
        SiameseMatcher(dis_thr="auto").fit()
    fixed = SiameseMatcher(dis_thr=1.5, mode="optimal").fit()
    assert fixed.config_.mode == "optimal" and fixed.threshold_ == 1.5
