"""Two-stage distillation training loop, optimizer, schedule and evaluation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .correspondence import PointPixelPairs, project_scene
from .encoders import DistillationModel, backward_2d, backward_3d, pixel_lookup
from .losses import combined_loss, kl_vmf_loss, ppnce_loss, supervised_nce_loss
from .sampling import SAMPLING_MODES, compute_weights, draw_pairs
from .utils.validation import DegenerateInputError, check_generator
from .vmf import ClassStatistics, class_means, ema_update

__all__ = [
    "METRIC_COLUMNS",
    "CrossModalDistiller",
    "LinearProbe",
    "TrainConfig",
    "cosine_lr",
    "evaluate",
    "linear_probe",
    "sgd_step",
    "train",
    "train_epoch",
    "variance_metrics",
]

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "ppnce", "sup", "kl", "total", "lr", "sigma_w_sq", "sigma_b_sq",
                  "grad_norm_pp", "grad_norm_sem", "zbar_norms")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_scenes: int = 1
    m_s: int = 256
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 0.99
    tau: float = 0.07
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    bandwidth_mode: str = "silverman"
    bandwidth: float = 1.0           # used when bandwidth_mode == "fixed"
    kernel: str = "standard"
    sampling_mode: str = "dcas"
    seed: int = 0
    hidden: tuple = (32, 32)
    c3d: int = 16
    c: int = 8
    train_2d_heads: bool = False
    kappa_max: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.lr0 <= 0:
            raise ValueError("lr0 must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.epochs < 1 or self.batch_scenes < 1 or self.m_s < 1:
            raise ValueError("epochs, batch_scenes and m_s must be >= 1")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"sampling_mode must be one of {SAMPLING_MODES}")
        if self.bandwidth_mode not in ("silverman", "fixed"):
            raise ValueError("bandwidth_mode must be 'silverman' or 'fixed'")
        if self.bandwidth_mode == "fixed" and self.bandwidth <= 0:
            raise ValueError("fixed bandwidth must be > 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def cosine_lr(t: int, T: int, lr0: float) -> float:
    if T <= 0:
        raise ValueError("total steps T must be > 0")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return lr0 * (1.0 + math.cos(math.pi * t / T)) / 2.0


def sgd_step(params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> None:
    """Momentum SGD with coupled weight decay, in place on ``params`` and ``state``.

    Parameters without a gradient entry still receive weight decay.
    """
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(sorted(bad))}")
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}; parameter has {p.shape}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        step = weight_decay * p if g is None else g + weight_decay * p
        v *= momentum
        v += step
        p -= lr * v


def variance_metrics(features, labels) -> tuple[float, float]:
    """Within-class and between-class spread of ``features`` grouped by ``labels``.

    Classes with fewer than two samples are ignored.
    """
    X = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    classes = classes[counts >= 2]
    if classes.size < 2:
        raise DegenerateInputError("need at least two classes with two samples each")
    keep = np.isin(labels, classes)
    X, labels = X[keep], labels[keep]
    means = np.stack([X[labels == k].mean(axis=0) for k in classes])
    within = np.mean([np.mean(np.sum((X[labels == k] - means[j]) ** 2, axis=1))
                      for j, k in enumerate(classes)])
    between = np.mean(np.sum((means - X.mean(axis=0)) ** 2, axis=1))
    return float(within), float(between)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression by full-batch gradient descent on standardized inputs.

    The optimizer is fixed (``max_iter`` steps at ``learning_rate``, zero
    initialization, no regularization) so results are comparable across runs.
    """

    def __init__(self, max_iter=500, learning_rate=0.1):
        self.max_iter = max_iter
        self.learning_rate = learning_rate

    def fit(self, X, y):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise DegenerateInputError("linear probe needs at least two classes")
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 0, std, 1.0)
        Z = (X - self.mean_) / self.scale_
        n, K = Z.shape[0], self.classes_.size
        onehot = np.eye(K)[y_idx]
        W = np.zeros((Z.shape[1], K))
        b = np.zeros(K)
        for _ in range(self.max_iter):
            logits = Z @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            G = (P - onehot) / n
            W -= self.learning_rate * (Z.T @ G)
            b -= self.learning_rate * G.sum(axis=0)
        self.coef_, self.intercept_ = W, b
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def per_class_iou(y_true, y_pred, n_classes: int) -> np.ndarray:
    """IoU per class; NaN for classes absent from both truth and prediction."""
    iou = np.full(n_classes, np.nan)
    for k in range(n_classes):
        t, p = y_true == k, y_pred == k
        union = np.sum(t | p)
        if union:
            iou[k] = np.sum(t & p) / union
    return iou


def linear_probe(train_features, train_labels, test_features=None, test_labels=None,
                 n_classes: int | None = None) -> dict:
    """Fit a :class:`LinearProbe` and report accuracy, per-class IoU and mIoU."""
    probe = LinearProbe().fit(train_features, train_labels)
    if test_features is None:
        test_features, test_labels = train_features, train_labels
    test_labels = np.asarray(test_labels)
    pred = probe.predict(test_features)
    if n_classes is None:
        n_classes = int(max(np.max(train_labels), np.max(test_labels))) + 1
    iou = per_class_iou(test_labels, pred, n_classes)
    return {
        "accuracy": float(np.mean(pred == test_labels)),
        "per_class_iou": [None if np.isnan(v) else float(v) for v in iou],
        "miou": float(np.nanmean(iou)),
    }


@dataclass
class _PreparedScene:
    scene: object
    pairs: PointPixelPairs
    weights: object


def prepare_scenes(scenes, config: TrainConfig) -> list[_PreparedScene]:
    """Correspondences and sampling weights; fixed across epochs so computed once."""
    prepared = []
    for scene in scenes:
        pairs = project_scene(scene.points, scene.cameras, scene.weak_label_image)
        if len(pairs) == 0:
            raise DegenerateInputError("scene has no visible points")
        bandwidth = "silverman" if config.bandwidth_mode == "silverman" else config.bandwidth
        ref = np.linalg.norm(scene.points, axis=1)
        weights = compute_weights(pairs, bandwidth, config.sampling_mode, reference_distances=ref,
                                  kernel=config.kernel, n_classes=scene.num_classes)
        prepared.append(_PreparedScene(scene, pairs, weights))
    return prepared


@dataclass
class TrainState:
    model: DistillationModel
    stats: ClassStatistics
    optimizer: dict = field(default_factory=dict)
    step: int = 0
    total_steps: int = 1
    epoch: int = 0


def _gather_batch(batch, config: TrainConfig, rng: np.random.Generator):
    point_inputs, labels, desc = [], [], []
    for prep in batch:
        m_s = min(config.m_s, len(prep.pairs))
        idx = np.sort(draw_pairs(prep.weights, m_s, rng))
        pairs = prep.pairs.subset(idx)
        point_inputs.append(prep.scene.point_descriptors[pairs.point_index])
        labels.append(pairs.weak_label)
        desc.append(pixel_lookup(prep.scene, pairs))
    return np.concatenate(point_inputs), np.concatenate(labels), np.concatenate(desc)


def train_epoch(prepared, state: TrainState, config: TrainConfig, rng: np.random.Generator) -> dict:
    """One pass over the scenes; returns the epoch's metric record."""
    model, stats = state.model, state.stats
    # vMF targets are refreshed once per epoch from the EMA statistics
    class_params, usable = stats.estimate(config.kappa_max)
    order = rng.permutation(len(prepared))
    sums = {"ppnce": 0.0, "sup": 0.0, "kl": 0.0, "total": 0.0, "grad_norm_pp": 0.0, "grad_norm_sem": 0.0}
    sem_feats, sem_labels = [], []
    n_batches = 0
    lr = cosine_lr(state.step, state.total_steps, config.lr0)
    params = model.parameters(trainable_only=True)
    for start in range(0, len(order), config.batch_scenes):
        batch = [prepared[i] for i in order[start:start + config.batch_scenes]]
        x, labels, desc = _gather_batch(batch, config, rng)
        f3d, g3d, cache = model.forward_3d(x)
        f2d, g2d, caches_2d = model.forward_2d(desc)

        # stage 1: statistics
        means, counts = class_means(g3d, labels, stats.n_classes)
        ema_update(stats, means, counts)

        # stage 2: objectives against the epoch's frozen targets
        l_pp = ppnce_loss(f3d, f2d, config.tau)
        l_sup = supervised_nce_loss(g3d, g2d, labels, config.tau)
        l_kl = kl_vmf_loss(g3d, labels, class_params, usable)
        total = combined_loss(l_pp, l_sup, l_kl, config.lambda1, config.lambda2, config.lambda3)
        grads = backward_3d(model, cache, total.grad_pp, total.grad_sem)
        if model.train_2d_heads:
            grads.update(backward_2d(model, caches_2d, config.lambda1 * l_pp.grad_2d,
                                     config.lambda2 * l_sup.grad_2d))

        lr = cosine_lr(state.step, state.total_steps, config.lr0)
        sgd_step(params, grads, state.optimizer, lr, config.momentum, config.weight_decay)
        state.step += 1

        for key, val in total.components.items():
            sums[key] += val
        sums["total"] += total.value
        sums["grad_norm_pp"] += float(np.linalg.norm(total.grad_pp))
        sums["grad_norm_sem"] += float(np.linalg.norm(total.grad_sem))
        sem_feats.append(g3d)
        sem_labels.append(labels)
        n_batches += 1

    try:
        sw, sb = variance_metrics(np.concatenate(sem_feats), np.concatenate(sem_labels))
    except DegenerateInputError:
        sw = sb = float("nan")
    record = {"epoch": state.epoch}
    record.update({k: sums[k] / n_batches for k in ("ppnce", "sup", "kl", "total")})
    record.update({"lr": lr, "sigma_w_sq": sw, "sigma_b_sq": sb,
                   "grad_norm_pp": sums["grad_norm_pp"] / n_batches,
                   "grad_norm_sem": sums["grad_norm_sem"] / n_batches,
                   "zbar_norms": [float(v) if ok else None for v, ok in
                                  zip(np.linalg.norm(stats.zbar, axis=1), stats.initialized)]})
    state.epoch += 1
    return record


def init_state(config: TrainConfig, input_dim: int, pixel_dim: int, n_classes: int,
               total_steps: int) -> tuple[TrainState, np.random.Generator]:
    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    model = DistillationModel.init(input_dim, config.hidden, config.c3d, config.c, pixel_dim,
                                   config.train_2d_heads, np.random.default_rng(init_seq))
    stats = ClassStatistics.empty(n_classes, config.c, config.alpha)
    return TrainState(model, stats, total_steps=total_steps), np.random.default_rng(sample_seq)


def train(scenes, config: TrainConfig, callback=None) -> tuple[TrainState, list[dict]]:
    """Run ``config.epochs`` epochs; ``callback(record)`` is called after each one."""
    if not scenes:
        raise ValueError("need at least one training scene")
    prepared = prepare_scenes(scenes, config)
    first = scenes[0]
    steps_per_epoch = math.ceil(len(scenes) / config.batch_scenes)
    state, rng = init_state(config, first.point_descriptors.shape[1], first.pixel_descriptors.shape[-1],
                            first.num_classes, config.epochs * steps_per_epoch)
    logger.info("training %d epochs on %d scenes (tau=%g, lambdas=%g/%g/%g, sampling=%s)",
                config.epochs, len(scenes), config.tau, config.lambda1, config.lambda2,
                config.lambda3, config.sampling_mode)
    history = []
    for _ in range(config.epochs):
        record = train_epoch(prepared, state, config, rng)
        logger.debug("epoch %d total=%.5f", record["epoch"], record["total"])
        history.append(record)
        if callback is not None:
            callback(record)
    return state, history


def evaluate(model: DistillationModel, eval_scenes) -> dict:
    """Linear probe on frozen trunk features plus sem-head spread, on held-out scenes.

    Points are split alternately into probe-training and probe-test halves.
    """
    X = np.concatenate([s.point_descriptors for s in eval_scenes])
    y = np.concatenate([s.true_labels for s in eval_scenes])
    n_classes = eval_scenes[0].num_classes
    feats = model.trunk_features(X)
    train_idx, test_idx = np.arange(0, y.size, 2), np.arange(1, y.size, 2)
    result = linear_probe(feats[train_idx], y[train_idx], feats[test_idx], y[test_idx], n_classes)
    _, g3d, _ = model.forward_3d(X)
    result["sigma_w_sq"], result["sigma_b_sq"] = variance_metrics(g3d, y)
    return result


class CrossModalDistiller(TransformerMixin, BaseEstimator):
    """Image-to-point contrastive distillation with vMF regularization.

    ``fit`` takes a list of scenes; ``transform`` maps point descriptors to
    frozen trunk features.  Hyperparameters mirror :class:`TrainConfig`.
    """

    def __init__(self, epochs=50, batch_scenes=1, m_s=256, lr0=0.05, momentum=0.9,
                 weight_decay=1e-4, alpha=0.99, tau=0.07, lambda1=1.0, lambda2=1.0, lambda3=1.0,
                 bandwidth_mode="silverman", bandwidth=1.0, kernel="standard", sampling_mode="dcas",
                 seed=0, hidden=(32, 32), c3d=16, c=8, train_2d_heads=False, kappa_max=None):
        self.epochs = epochs
        self.batch_scenes = batch_scenes
        self.m_s = m_s
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.tau = tau
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.bandwidth_mode = bandwidth_mode
        self.bandwidth = bandwidth
        self.kernel = kernel
        self.sampling_mode = sampling_mode
        self.seed = seed
        self.hidden = hidden
        self.c3d = c3d
        self.c = c
        self.train_2d_heads = train_2d_heads
        self.kappa_max = kappa_max

    @classmethod
    def from_config(cls, config: TrainConfig) -> CrossModalDistiller:
        return cls(**dataclasses.asdict(config))

    def get_config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, scenes, y=None):
        state, history = train(list(scenes), self.get_config())
        self.model_ = state.model
        self.stats_ = state.stats
        self.history_ = history
        self.n_features_in_ = scenes[0].point_descriptors.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features; fitted with {self.n_features_in_}")
        return self.model_.trunk_features(X)

    def embed(self, X, head: str = "sem"):
        """Normalized embeddings from the ``"pp"`` or ``"sem"`` head."""
        check_is_fitted(self, "model_")
        f3d, g3d, _ = self.model_.forward_3d(check_array(X, dtype=np.float64))
        return {"pp": f3d, "sem": g3d}[head]

    def score(self, scenes, y=None):
        """Held-out linear-probe accuracy."""
        return evaluate(self.model_, list(scenes))["accuracy"]
