"""scikit-learn estimator facade over the spiking classifier training stack."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .architectures import build, forward, synapse_counts
from .data import ChannelStats, Dataset, channel_stats, encode
from .energy import EnergyReport, SpikeStats, energy
from .penalty import PenaltyConfig
from .spiking import SpikeRecord, SurrogateKind
from .training import TrainConfig, evaluate, train


def _as_images(X, input_shape=None):
    """Coerce a validated 2-d or 4-d sample matrix into NCHW float32 images."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 4:
        return X
    if X.ndim != 2:
        raise ValueError(f"expected 2-d or 4-d input, got shape {X.shape}")
    if input_shape is not None:
        c, h, w = input_shape
        if X.shape[1] != c * h * w:
            raise ValueError(f"flat input width {X.shape[1]} does not match {input_shape}")
        return X.reshape(-1, c, h, w)
    side = int(round(np.sqrt(X.shape[1])))
    if side * side == X.shape[1]:
        return X.reshape(-1, 1, side, side)
    side = int(round(np.sqrt(X.shape[1] / 3)))
    if 3 * side * side == X.shape[1]:
        return X.reshape(-1, 3, side, side)
    raise ValueError(
        f"cannot infer image shape from flat width {X.shape[1]}; pass 4-d input instead"
    )


class SpikingClassifier(ClassifierMixin, BaseEstimator):
    """Single-step spiking CNN classifier trained with a spike-activity penalty.

    ``lambda_intensity`` is the penalty strength; with ``normalized=True`` it
    is divided by the architecture's all-fire penalty total, so comparable
    values mean comparable pressure across architectures and penalty kinds.

    Examples
    --------
    >>> clf = SpikingClassifier(epochs=2, batch_size=32)
    >>> clf.fit(X_train, y_train).score(X_test, y_test)  # doctest: +SKIP
    """

    def __init__(
        self,
        architecture="cnn7",
        penalty="syn",
        p=1,
        lambda_intensity=0.0,
        normalized=True,
        optimizer="adam",
        learning_rate=1e-3,
        weight_decay=1e-4,
        bn_weight_decay=0,
        epochs=10,
        batch_size=100,
        surrogate="s3nn",
        alpha=0.25,
        tau=0.6,
        threshold=1.0,
        validation_fraction=0.1,
        augment=False,
        flip=False,
        seed=0,
    ):
        self.architecture = architecture
        self.penalty = penalty
        self.p = p
        self.lambda_intensity = lambda_intensity
        self.normalized = normalized
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.bn_weight_decay = bn_weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.surrogate = surrogate
        self.alpha = alpha
        self.tau = tau
        self.threshold = threshold
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.flip = flip
        self.seed = seed

    def _train_config(self):
        return TrainConfig(
            optimizer=self.optimizer,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            bn_weight_decay=self.bn_weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            surrogate=SurrogateKind(self.surrogate, alpha=self.alpha, tau=self.tau, u_th=self.threshold),
            penalty=PenaltyConfig(self.penalty, p=self.p, lam=self.lambda_intensity, normalized=self.normalized),
            augment=self.augment,
            flip=self.flip,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype="numeric")
        images = _as_images(X)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("fit needs at least two classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = images.shape[1:]

        rng = np.random.default_rng(self.seed)
        n = images.shape[0]
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n_val >= n:
            raise ValueError(f"validation_fraction={self.validation_fraction} leaves no training data")
        perm = rng.permutation(n)
        val_idx, tr_idx = perm[:n_val], perm[n_val:]
        train_ds = Dataset(images[tr_idx], y_idx[tr_idx].astype(np.int64), "train")
        val_ds = Dataset(images[val_idx], y_idx[val_idx].astype(np.int64), "val")

        self.graph_ = build(self.architecture, self.input_shape_, num_classes=len(self.classes_))
        self.table_ = synapse_counts(self.graph_)
        self.stats_ = channel_stats(train_ds)
        result = train(self.graph_, train_ds, val_ds, self.stats_, self._train_config(), table=self.table_)
        self.state_ = result.best_state
        self.train_log_ = result.log
        self.failed_ = result.failed
        return self

    def _encoded(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, allow_nd=True, dtype="numeric")
        images = _as_images(X, input_shape=self.input_shape_)
        if images.shape[1:] != tuple(self.input_shape_):
            raise ValueError(f"expected images of shape {self.input_shape_}, got {images.shape[1:]}")
        return encode(images, self.stats_).astype(np.float32)

    def decision_function(self, X):
        x = self._encoded(X)
        kind = SurrogateKind(self.surrogate, alpha=self.alpha, tau=self.tau, u_th=self.threshold)
        logits = []
        for start in range(0, x.shape[0], self.batch_size):
            out, _ = forward(self.graph_, self.state_, x[start : start + self.batch_size], kind, mode="eval")
            logits.append(out.data)
        return np.concatenate(logits)

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def energy_report(self, X) -> EnergyReport:
        """Spike-energy accounting of the fitted network over the given samples."""
        x = self._encoded(X)
        kind = SurrogateKind(self.surrogate, alpha=self.alpha, tau=self.tau, u_th=self.threshold)
        stats = SpikeStats(self.table_)
        for start in range(0, x.shape[0], self.batch_size):
            record = SpikeRecord()
            forward(self.graph_, self.state_, x[start : start + self.batch_size], kind, mode="eval", record=record)
            stats.update(record)
        return energy(stats)
