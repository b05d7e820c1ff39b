import math

import numpy as np
import pytest

from oracles import central_difference
from sianms.association import AssociationConfig, match_frame, score_matches
from sianms.contrastive import (LossConfig, PairBatch, PairIndex, SiameseEncoder, ToyEncoder,
                                dimension_sweep, embedding_gradient, embedding_loss, loss,
                                loss_gradient, ohem_select_negative, sample_pairs, train)
from sianms.exceptions import DivergenceError, SceneFormatError, ValidationError
from sianms.simulator import SimConfig, generate_scene


@pytest.fixture(scope="module")
def separable_scenes():
    cfg = SimConfig(n_frames=20, embedding_sigma=0.05, view_drift=0.0)
    return [generate_scene(cfg.replace(seed=s)) for s in (1, 2)]


@pytest.fixture(scope="module")
def index(separable_scenes):
    return PairIndex(separable_scenes)


# ----------------------------------------------------------------------------- loss values

def test_loss_examples():
    z = np.zeros((1, 2))
    assert embedding_loss(z, [[0.5, 0.0]], [True]) == 0.0
    assert embedding_loss(z, [[2.0, 0.0]], [True]) == pytest.approx(0.5)
    assert embedding_loss(z, z, [False]) == pytest.approx(4.5)
    assert embedding_loss(z, [[3.5, 0.0]], [False]) == 0.0


def test_loss_shape_mismatch():
    with pytest.raises(ValidationError):
        embedding_loss(np.zeros((1, 2)), np.zeros((1, 3)), [True])


def test_margin_invariant():
    with pytest.raises(ValidationError):
        LossConfig(alpha=2.0, beta=2.0)
    with pytest.raises(ValidationError):
        LossConfig(alpha=3.0, beta=1.0)


# ----------------------------------------------------------------------------- gradients

def test_inactive_hinge_has_zero_gradient():
    g_ref, g_cand = embedding_gradient([[0.0, 0.0]], [[0.3, 0.4]], [True])
    assert not g_ref.any() and not g_cand.any()


def _away_from_kinks(rng, n, dim, cfg):
    while True:
        a, b = rng.normal(0, 1.5, (n, dim)), rng.normal(0, 1.5, (n, dim))
        d = np.linalg.norm(a - b, axis=1)
        if np.all(np.abs(d - cfg.alpha) > 0.05) and np.all(np.abs(d - cfg.beta) > 0.05):
            return a, b


def test_embedding_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    cfg = LossConfig()
    for _ in range(10):
        a, b = _away_from_kinks(rng, 6, 4, cfg)
        pos = rng.random(6) < 0.5
        g_ref, g_cand = embedding_gradient(a, b, pos, cfg)
        assert np.allclose(g_ref, central_difference(lambda x: embedding_loss(x, b, pos, cfg), a),
                           atol=1e-6)
        assert np.allclose(g_cand, central_difference(lambda x: embedding_loss(a, x, pos, cfg), b),
                           atol=1e-6)


def test_parameter_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    enc = ToyEncoder.init(5, 3, 4, rng)
    batch = PairBatch(rng.normal(size=(6, 5)), rng.normal(size=(6, 5)),
                      [True, False, True, False, True, False])
    cfg = LossConfig(d=3)
    _, grads, _ = loss_gradient(batch, enc, cfg)
    for k, name in enumerate(ToyEncoder.PARAM_NAMES):
        def f(p, k=k):
            params = [q.copy() for q in enc.params()]
            params[k] = p
            return loss(batch, ToyEncoder(*params), cfg)
        assert np.allclose(grads[k], central_difference(f, enc.params()[k]), atol=1e-6), name


# ----------------------------------------------------------------------------- mining

def test_ohem_picks_highest_loss():
    cands = [[3 - math.sqrt(t)] for t in (0.2, 1.4, 0.7)]
    assert ohem_select_negative([[0.0]], cands) == 1


def test_ohem_tie_goes_to_first():
    assert ohem_select_negative([[0.0]], [[5.0], [4.0], [7.0]]) == 0


def test_ohem_empty():
    with pytest.raises(ValidationError):
        ohem_select_negative([[0.0]], np.zeros((0, 1)))


def test_sample_pairs_ratio_and_determinism(index):
    batch = sample_pairs(index, 8, 42)
    assert batch.n_positive == 4 and len(batch) == 8
    again = sample_pairs(index, 8, 42)
    assert np.array_equal(batch.x_ref, again.x_ref)
    assert np.array_equal(batch.x_cand, again.x_cand)
    assert np.array_equal(batch.positive, again.positive)
    assert np.all((batch.ref_ids == batch.cand_ids) == batch.positive)


def test_sample_pairs_with_encoder_uses_hard_negatives(index):
    enc = ToyEncoder.init(16, 8, 8, 0)
    batch = sample_pairs(index, 8, 3, encoder=enc)
    assert batch.n_positive == 4


def test_sample_pairs_needs_instances():
    scene = generate_scene(SimConfig(n_frames=1, objects_per_frame=(1, 1), seed=0))
    with pytest.raises(ValidationError):
        PairIndex([scene])


# ----------------------------------------------------------------------------- training

def test_training_reduces_loss_tenfold(index):
    probe = sample_pairs(index, 256, 123)
    init = ToyEncoder.init(16, 100, 64, 0)
    result = train(init, index, epochs=10, lr=0.02, rng=0)
    assert loss(probe, result.encoder) < 0.1 * loss(probe, init)
    assert len(result.loss_curve) == 10


def test_zero_learning_rate_keeps_weights(index):
    init = ToyEncoder.init(16, 10, 8, 0)
    result = train(init, index, epochs=2, lr=0.0, batches_per_epoch=5, rng=0)
    for p, q in zip(init.params(), result.encoder.params()):
        assert np.array_equal(p, q)


def test_divergence_is_reported(index):
    with pytest.raises(DivergenceError, match="epoch"):
        train(ToyEncoder.init(16, 10, 8, 0), index, epochs=30, lr=1e6, rng=0)


def test_trained_embeddings_match_well(separable_scenes):
    est = SiameseEncoder(epochs=6).fit(separable_scenes)
    scene = generate_scene(SimConfig(n_frames=10, seed=9))
    counts = [score_matches(scene.rig, f, match_frame(scene.rig, f, AssociationConfig(), est))
              for f in scene.frames]
    tp = sum(c.tp for c in counts)
    assert tp / (tp + sum(c.fp + c.fn for c in counts)) > 0.8


# ----------------------------------------------------------------------------- persistence

def test_encoder_save_load_exact(tmp_path):
    enc = ToyEncoder.init(4, 3, 5, 7)
    enc.save(tmp_path / "e.txt", LossConfig(1.0, 3.0, 3))
    back, cfg = ToyEncoder.load(tmp_path / "e.txt")
    assert cfg == LossConfig(1.0, 3.0, 3)
    for p, q in zip(enc.params(), back.params()):
        assert np.array_equal(p, q)


def test_encoder_load_errors(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("hello\n")
    with pytest.raises(SceneFormatError, match="line 1"):
        ToyEncoder.load(bad)
    bad.write_text("sianms-encoder 1\nW1 2 2\n1 2\n")
    with pytest.raises(SceneFormatError, match="line 2"):
        ToyEncoder.load(bad)


def test_estimator_roundtrip(tmp_path, separable_scenes):
    est = SiameseEncoder(n_components=8, hidden_units=8, epochs=1, batches_per_epoch=5)
    est.fit(separable_scenes)
    assert est.get_params()["n_components"] == 8
    est.save(tmp_path / "enc.txt")
    back = SiameseEncoder.load(tmp_path / "enc.txt")
    X = np.random.default_rng(0).normal(size=(3, 16))
    assert np.array_equal(est.transform(X), back.transform(X))
    assert est.transform(X).shape == (3, 8)


def test_dimension_sweep_shape(separable_scenes):
    out = dimension_sweep(separable_scenes[:1], separable_scenes[1:], dims=(5, 20),
                          epochs=1, batches_per_epoch=10)
    assert [d for d, _ in out] == [5, 20]
    assert all(0.0 <= f <= 1.0 for _, f in out)
