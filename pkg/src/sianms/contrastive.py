"""Double-margin contrastive loss, its gradients, hard-negative pair mining and
a small siamese encoder trained with plain step-decayed gradient descent."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .association import SiameseMatcher, overlap_candidates
from .exceptions import DivergenceError, SceneFormatError, ValidationError
from .geometry import DetectionRange
from .scene import Scene
from .validation import check_embeddings


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 3.0
    d: int = 100

    def __post_init__(self):
        if not 0.0 <= self.alpha < self.beta:
            raise ValidationError(f"need 0 <= alpha < beta, got alpha={self.alpha}, beta={self.beta}")
        if self.d < 1:
            raise ValidationError("embedding dimension must be positive")


@dataclass(frozen=True, eq=False)
class PairBatch:
    """Reference/candidate feature pairs with a positive/negative label each.

    ``ref_ids``/``cand_ids`` carry the instance ids the pairs were drawn from;
    they are bookkeeping only.
    """

    x_ref: np.ndarray
    x_cand: np.ndarray
    positive: np.ndarray
    ref_ids: np.ndarray | None = None
    cand_ids: np.ndarray | None = None

    def __post_init__(self):
        xr = check_embeddings(self.x_ref)
        xc = check_embeddings(self.x_cand)
        pos = np.asarray(self.positive, dtype=bool).reshape(-1)
        if xr.shape != xc.shape or xr.shape[0] != pos.shape[0]:
            raise ValidationError(
                f"batch shapes disagree: {xr.shape}, {xc.shape}, {pos.shape}")
        if xr.shape[0] < 1:
            raise ValidationError("a batch needs at least one pair")
        object.__setattr__(self, "x_ref", xr)
        object.__setattr__(self, "x_cand", xc)
        object.__setattr__(self, "positive", pos)

    def __len__(self):
        return self.positive.shape[0]

    @property
    def n_positive(self) -> int:
        return int(self.positive.sum())


# --------------------------------------------------------------------------- loss on embeddings

def pair_distances(f_ref: np.ndarray, f_cand: np.ndarray) -> np.ndarray:
    diff = np.asarray(f_ref) - np.asarray(f_cand)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def pair_losses(f_ref, f_cand, positive, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Per-pair loss terms before the factor 1/2."""
    dist = pair_distances(f_ref, f_cand)
    pos = np.asarray(positive, dtype=bool)
    return np.where(pos, np.maximum(dist - cfg.alpha, 0.0) ** 2,
                    np.maximum(cfg.beta - dist, 0.0) ** 2)


def embedding_loss(f_ref, f_cand, positive, cfg: LossConfig = LossConfig()) -> float:
    """``1/2 * sum`` of the hinge terms over the batch."""
    f_ref, f_cand = np.atleast_2d(f_ref), np.atleast_2d(f_cand)
    if f_ref.shape != f_cand.shape:
        raise ValidationError(f"embedding shapes differ: {f_ref.shape} vs {f_cand.shape}")
    return 0.5 * float(np.sum(pair_losses(f_ref, f_cand, positive, cfg)))


def embedding_gradient(f_ref, f_cand, positive, cfg: LossConfig = LossConfig()):
    """Gradients of :func:`embedding_loss` w.r.t. both embedding arrays.

    Inactive hinges contribute zero, and so does a negative pair at distance
    exactly zero (subgradient convention).
    """
    f_ref, f_cand = np.atleast_2d(f_ref).astype(float), np.atleast_2d(f_cand).astype(float)
    diff = f_ref - f_cand
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    pos = np.asarray(positive, dtype=bool)
    safe = np.where(dist > 0.0, dist, 1.0)
    coef = np.where(pos, np.maximum(dist - cfg.alpha, 0.0) / safe,
                    -np.maximum(cfg.beta - dist, 0.0) / safe)
    coef = np.where(dist > 0.0, coef, 0.0)
    g_ref = coef[:, None] * diff
    return g_ref, -g_ref


# --------------------------------------------------------------------------- encoder

class ToyEncoder:
    """Two-layer map ``x -> W2 tanh(W1 x + b1) + b2`` shared by both siamese branches."""

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.asarray(W1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float).reshape(-1)
        self.W2 = np.asarray(W2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float).reshape(-1)
        shapes_ok = (self.W1.shape[1] == self.b1.shape[0] == self.W2.shape[0]
                     and self.W2.shape[1] == self.b2.shape[0])
        if not shapes_ok:
            raise ValidationError("inconsistent encoder weight shapes")
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValidationError("encoder weights must be finite")

    @classmethod
    def init(cls, input_dim: int, output_dim: int = 100, hidden: int = 64,
             rng: np.random.Generator | int | None = 0) -> "ToyEncoder":
        rng = np.random.default_rng(rng)
        W1 = rng.normal(0.0, 1.0 / math.sqrt(input_dim), (input_dim, hidden))
        W2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (hidden, output_dim))
        return cls(W1, np.zeros(hidden), W2, np.zeros(output_dim))

    PARAM_NAMES = ("W1", "b1", "W2", "b2")

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "ToyEncoder":
        return ToyEncoder(*(p.copy() for p in self.params()))

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[1]

    def forward(self, X, return_hidden: bool = False):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.input_dim:
            raise ValidationError(f"encoder expects {self.input_dim} features, got {X.shape[1]}")
        H = np.tanh(X @ self.W1 + self.b1)
        F = H @ self.W2 + self.b2
        return (F, H) if return_hidden else F

    __call__ = forward

    def backward(self, X, H, grad_F) -> list[np.ndarray]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        gA = (grad_F @ self.W2.T) * (1.0 - H * H)
        return [X.T @ gA, gA.sum(axis=0), H.T @ grad_F, grad_F.sum(axis=0)]

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        for p, g in zip(self.params(), grads):
            p -= lr * g

    def save(self, path: str | Path, cfg: LossConfig | None = None) -> None:
        """Plain-text weights: a header line per array (name rows cols) followed
        by its values row-major, one row per line, in full precision."""
        lines = ["sianms-encoder 1"]
        if cfg is not None:
            lines.append(f"margins {cfg.alpha!r} {cfg.beta!r}")
        for name, p in zip(self.PARAM_NAMES, self.params()):
            mat = np.atleast_2d(p)
            lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
            lines.extend(" ".join(repr(float(v)) for v in row) for row in mat)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> tuple["ToyEncoder", LossConfig | None]:
        rows = Path(path).read_text().splitlines()
        if not rows or rows[0].split()[:1] != ["sianms-encoder"]:
            raise SceneFormatError(f"{path}: line 1: not an encoder weights file")
        arrays, cfg, k = {}, None, 1
        while k < len(rows):
            head = rows[k].split()
            if not head:
                k += 1
                continue
            if head[0] == "margins":
                cfg = LossConfig(alpha=float(head[1]), beta=float(head[2]))
                k += 1
                continue
            try:
                name, r, c = head[0], int(head[1]), int(head[2])
                vals = [[float(v) for v in rows[k + 1 + i].split()] for i in range(r)]
                mat = np.array(vals, dtype=float)
                if mat.shape != (r, c):
                    raise ValueError(f"expected {r}x{c} values")
            except (IndexError, ValueError) as exc:
                raise SceneFormatError(f"{path}: line {k + 1}: bad array block ({exc})") from None
            arrays[name] = mat
            k += 1 + r
        missing = [n for n in cls.PARAM_NAMES if n not in arrays]
        if missing:
            raise SceneFormatError(f"{path}: missing arrays {missing}")
        enc = cls(arrays["W1"], arrays["b1"], arrays["W2"], arrays["b2"])
        if cfg is not None:
            cfg = LossConfig(cfg.alpha, cfg.beta, enc.output_dim)
        return enc, cfg


# --------------------------------------------------------------------------- loss through the encoder

def loss(batch: PairBatch, encoder: ToyEncoder, cfg: LossConfig = LossConfig()) -> float:
    return embedding_loss(encoder(batch.x_ref), encoder(batch.x_cand), batch.positive, cfg)


def loss_gradient(batch: PairBatch, encoder: ToyEncoder, cfg: LossConfig = LossConfig()):
    """Loss value, gradients w.r.t. encoder parameters, and w.r.t. the two
    embedding arrays, as ``(value, param_grads, (g_ref, g_cand))``."""
    n = len(batch)
    X = np.vstack([batch.x_ref, batch.x_cand])
    F, H = encoder.forward(X, return_hidden=True)
    f_ref, f_cand = F[:n], F[n:]
    value = embedding_loss(f_ref, f_cand, batch.positive, cfg)
    g_ref, g_cand = embedding_gradient(f_ref, f_cand, batch.positive, cfg)
    grads = encoder.backward(X, H, np.vstack([g_ref, g_cand]))
    return value, grads, (g_ref, g_cand)


def ohem_select_negative(reference, candidates, encoder: ToyEncoder | None = None,
                         cfg: LossConfig = LossConfig()) -> int:
    """Index of the candidate negative with the largest loss term.

    Ties (e.g. every candidate already beyond ``beta``) go to the first one.
    """
    C = np.atleast_2d(np.asarray(candidates, dtype=float))
    if C.size == 0:
        raise ValidationError("no candidate negatives to choose from")
    r = np.atleast_2d(np.asarray(reference, dtype=float))
    if encoder is not None:
        r, C = encoder(r), encoder(C)
    terms = pair_losses(np.repeat(r, C.shape[0], axis=0), C, np.zeros(C.shape[0], bool), cfg)
    return int(np.argmax(terms))


# --------------------------------------------------------------------------- pair sampling

class PairIndex:
    """Cross-camera occurrences of labelled instances, grouped for sampling.

    ``positives`` holds ``(scene, inst, cam_a, x_a, cam_b, x_b)`` for every
    instance seen by two adjacent cameras in the same frame.  ``pools`` maps
    ``(scene, camera)`` to the overlap-region occurrences per instance.
    """

    def __init__(self, scenes: Sequence[Scene], rng: DetectionRange = DetectionRange()):
        self.positives = []
        self.pools: dict[tuple[int, int], dict[int, list[np.ndarray]]] = {}
        self.scene_instances: dict[int, dict[int, list[np.ndarray]]] = {}
        for s, scene in enumerate(scenes):
            rig = scene.rig
            everything = self.scene_instances.setdefault(s, {})
            for frame in scene.frames:
                for dets in frame.detections.values():
                    for det in dets:
                        if det.instance_id is not None and det.embedding is not None:
                            everything.setdefault(det.instance_id, []).append(det.embedding)
                for pair in rig.adjacency:
                    list_a, list_b = overlap_candidates(rig, frame, pair, rng=rng)
                    dets_a = [frame.detections[c][i] for c, i in list_a]
                    dets_b = [frame.detections[c][i] for c, i in list_b]
                    for cam, dets in ((pair[0], dets_a), (pair[1], dets_b)):
                        pool = self.pools.setdefault((s, cam), {})
                        for det in dets:
                            if det.instance_id is not None and det.embedding is not None:
                                pool.setdefault(det.instance_id, []).append(det.embedding)
                    for da in dets_a:
                        for db in dets_b:
                            if (da.instance_id is not None and da.instance_id == db.instance_id
                                    and da.embedding is not None and db.embedding is not None):
                                self.positives.append((s, da.instance_id, pair[0], da.embedding,
                                                       pair[1], db.embedding))
        n_inst = len({(s, i) for s, d in self.scene_instances.items() for i in d})
        if not self.positives or n_inst < 2:
            raise ValidationError(
                "need at least two labelled instances and one cross-camera occurrence")

    def negative_candidates(self, scene: int, inst: int, cam: int,
                            rng: np.random.Generator) -> tuple[int, list[np.ndarray]]:
        pool = self.pools.get((scene, cam), {})
        others = sorted(k for k in pool if k != inst)
        if others:
            neg = others[rng.integers(len(others))]
            return neg, pool[neg]
        everything = self.scene_instances[scene]
        others = sorted(k for k in everything if k != inst)
        if others:
            neg = others[rng.integers(len(others))]
            return neg, everything[neg]
        keys = sorted((s, k) for s, d in self.scene_instances.items() for k in d if s != scene)
        s2, neg = keys[rng.integers(len(keys))]
        return neg, self.scene_instances[s2][neg]


def sample_pairs(index: PairIndex | Sequence[Scene], n: int = 8, rng=None,
                 encoder: ToyEncoder | None = None, cfg: LossConfig = LossConfig()) -> PairBatch:
    """Draw ``ceil(n/2)`` positive and ``floor(n/2)`` negative pairs.

    Each pair starts from a random cross-camera occurrence; the reference is
    one side at random.  Negatives come from another instance of the same
    scene seen in the contiguous camera; with an encoder, the hardest of its
    occurrences is chosen, otherwise a random one.
    """
    if not isinstance(index, PairIndex):
        index = PairIndex(index)
    if n < 1:
        raise ValidationError("batch size must be positive")
    rng = np.random.default_rng(rng)
    n_pos = (n + 1) // 2
    xr, xc, pos, rid, cid = [], [], [], [], []
    for k in range(n):
        s, inst, cam_a, x_a, cam_b, x_b = index.positives[rng.integers(len(index.positives))]
        if rng.random() < 0.5:
            cam_a, x_a, cam_b, x_b = cam_b, x_b, cam_a, x_a
        xr.append(x_a)
        rid.append(inst)
        if k < n_pos:
            xc.append(x_b)
            cid.append(inst)
            pos.append(True)
        else:
            neg, cands = index.negative_candidates(s, inst, cam_b, rng)
            if encoder is None:
                j = int(rng.integers(len(cands)))
            else:
                j = ohem_select_negative(x_a, np.vstack(cands), encoder, cfg)
            xc.append(cands[j])
            cid.append(neg)
            pos.append(False)
    return PairBatch(np.vstack(xr), np.vstack(xc), np.array(pos), np.array(rid), np.array(cid))


# --------------------------------------------------------------------------- training

@dataclass
class TrainResult:
    encoder: ToyEncoder
    loss_curve: list[float]
    margin_stats: dict


def margin_statistics(batch: PairBatch, encoder: ToyEncoder, cfg: LossConfig) -> dict:
    dist = pair_distances(encoder(batch.x_ref), encoder(batch.x_cand))
    pos = batch.positive
    return {
        "positive_within_alpha": float(np.mean(dist[pos] < cfg.alpha)) if pos.any() else 1.0,
        "negative_beyond_beta": float(np.mean(dist[~pos] > cfg.beta)) if (~pos).any() else 1.0,
        "mean_positive_distance": float(dist[pos].mean()) if pos.any() else 0.0,
        "mean_negative_distance": float(dist[~pos].mean()) if (~pos).any() else 0.0,
    }


def train(encoder: ToyEncoder, scenes, cfg: LossConfig = LossConfig(), epochs: int = 25,
          lr: float = 0.01, batch_size: int = 8, batches_per_epoch: int = 50,
          decay_every: int = 8, decay: float = 0.1, ohem: bool = True,
          rng=None) -> TrainResult:
    """Gradient descent on the double-margin loss with step learning-rate decay.

    ``scenes`` may be a prebuilt :class:`PairIndex`.  The encoder is copied;
    the returned one holds the trained weights.
    """
    index = scenes if isinstance(scenes, PairIndex) else PairIndex(scenes)
    rng = np.random.default_rng(rng)
    enc = encoder.copy()
    curve = []
    for epoch in range(epochs):
        step = lr * decay ** (epoch // decay_every) if decay_every else lr
        total = 0.0
        for _ in range(batches_per_epoch):
            batch = sample_pairs(index, batch_size, rng, enc if ohem else None, cfg)
            with np.errstate(over="ignore", invalid="ignore"):
                value, grads, _ = loss_gradient(batch, enc, cfg)
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError(
                    f"loss diverged at epoch {epoch} (value={value}, lr={step}); "
                    f"max |W| = {max(float(np.abs(p).max()) for p in enc.params()):.3g}")
            if step:
                enc.step(grads, step)
            total += value
        curve.append(total / batches_per_epoch)
    probe = sample_pairs(index, max(64, batch_size), rng, None, cfg)
    return TrainResult(enc, curve, margin_statistics(probe, enc, cfg))


class SiameseEncoder(TransformerMixin, BaseEstimator):
    """Siamese embedding network trained with the double-margin contrastive loss.

    ``fit`` takes labelled scenes (detections carrying ``instance_id``);
    ``transform`` maps raw detection features of shape (n, input_dim) to
    embeddings of shape (n, n_components).
    """

    def __init__(self, n_components=100, hidden_units=64, alpha=1.0, beta=3.0, epochs=25,
                 batch_size=8, batches_per_epoch=60, learning_rate=0.02, decay_every=8,
                 decay=0.1, ohem=True, random_state=0):
        self.n_components = n_components
        self.hidden_units = hidden_units
        self.alpha = alpha
        self.beta = beta
        self.epochs = epochs
        self.batch_size = batch_size
        self.batches_per_epoch = batches_per_epoch
        self.learning_rate = learning_rate
        self.decay_every = decay_every
        self.decay = decay
        self.ohem = ohem
        self.random_state = random_state

    def fit(self, scenes, y=None):
        cfg = LossConfig(self.alpha, self.beta, self.n_components)
        index = scenes if isinstance(scenes, PairIndex) else PairIndex(scenes)
        rng = np.random.default_rng(self.random_state)
        input_dim = index.positives[0][3].shape[0]
        init = ToyEncoder.init(input_dim, self.n_components, self.hidden_units, rng)
        result = train(init, index, cfg, self.epochs, self.learning_rate, self.batch_size,
                       self.batches_per_epoch, self.decay_every, self.decay, self.ohem, rng)
        self.encoder_ = result.encoder
        self.loss_curve_ = result.loss_curve
        self.margin_stats_ = result.margin_stats
        self.n_features_in_ = input_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        return self.encoder_(check_embeddings(X))

    def save(self, path) -> None:
        check_is_fitted(self, "encoder_")
        self.encoder_.save(path, LossConfig(self.alpha, self.beta, self.n_components))

    @classmethod
    def load(cls, path) -> "SiameseEncoder":
        enc, cfg = ToyEncoder.load(path)
        cfg = cfg or LossConfig(d=enc.output_dim)
        est = cls(n_components=enc.output_dim, hidden_units=enc.W1.shape[1],
                  alpha=cfg.alpha, beta=cfg.beta)
        est.encoder_ = enc
        est.n_features_in_ = enc.input_dim
        est.loss_curve_ = []
        return est

    @classmethod
    def from_encoder(cls, encoder: ToyEncoder, cfg: LossConfig = LossConfig()) -> "SiameseEncoder":
        est = cls(n_components=encoder.output_dim, hidden_units=encoder.W1.shape[1],
                  alpha=cfg.alpha, beta=cfg.beta)
        est.encoder_ = encoder
        est.n_features_in_ = encoder.input_dim
        est.loss_curve_ = []
        return est


def dimension_sweep(train_scenes, val_scenes, dims=(5, 10, 20, 50, 100, 200, 500, 1000),
                    dis_thr: float = 2.0, **params) -> list[tuple[int, float]]:
    """Validation match F1 for encoders of several output dimensions."""
    index = PairIndex(train_scenes)
    out = []
    for d in dims:
        enc = SiameseEncoder(n_components=d, **params).fit(index)
        matcher = SiameseMatcher(dis_thr=dis_thr, encoder=enc).fit()
        out.append((d, matcher.score(val_scenes)))
    return out
