"""scikit-learn style estimators over the motion network and its probes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as tn
from .backbone import MotionNetwork, NetworkConfig
from .trainer import LossWeights, TrainConfig, Trainer, fit_linear, knn_predict
from .validation import check_clip_labels, check_clips, check_features

__all__ = ["HCMLClassifier", "CosineKNNClassifier", "LinearProbe"]


@dataclass
class _Clips:
    clips: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


class HCMLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Video classifier trained with the progressive motion recipe.

    ``variant="full"`` runs reconstruction, level-1 and level-2 stages and then
    the joint loss; ``"pmb"`` trains motion blocks on classification only;
    ``"baseline"`` drops the motion blocks. ``transform`` returns globally
    pooled motion features of ``feature_level`` (backbone features for the
    baseline).
    """

    def __init__(self, variant: str = "full", recon_epochs: int = 4, recon_lr: float = 0.1,
                 level1_epochs: int = 3, level1_lr: float = 0.01, level2_epochs: int = 3,
                 level2_lr: float = 0.03, joint_epochs: int = 10, joint_lr: float = 0.03,
                 warmup_epochs: int = 1, batch_size: int = 8, feature_level: int = 2,
                 network: NetworkConfig | None = None, random_state: int = 0):
        self.variant = variant
        self.recon_epochs = recon_epochs
        self.recon_lr = recon_lr
        self.level1_epochs = level1_epochs
        self.level1_lr = level1_lr
        self.level2_epochs = level2_epochs
        self.level2_lr = level2_lr
        self.joint_epochs = joint_epochs
        self.joint_lr = joint_lr
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.feature_level = feature_level
        self.network = network
        self.random_state = random_state

    def _schedule(self, epochs: int, lr: float) -> TrainConfig:
        return TrainConfig(lr=lr, epochs=epochs, warmup_epochs=min(self.warmup_epochs, epochs - 1),
                           batch_size=self.batch_size, seed=self.random_state)

    def fit(self, X, y):
        if self.variant not in ("full", "pmb", "baseline"):
            raise ValueError(f"variant must be full, pmb or baseline, got {self.variant!r}")
        X, y = check_clip_labels(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        base = self.network or NetworkConfig()
        cfg = NetworkConfig(**{**base.__dict__, "num_classes": len(self.classes_)})
        net = MotionNetwork(cfg, seed=self.random_state, motion=self.variant != "baseline")
        weights = LossWeights() if self.variant == "full" else LossWeights(reconstruct=0.0, contrastive=(0.0, 0.0))
        self.trainer_ = Trainer(net, weights=weights, seed=self.random_state)
        data = _Clips(X, y_enc)
        self.history_ = []
        if self.variant == "full":
            for stage, ep, lr in (("recon", self.recon_epochs, self.recon_lr),
                                  ("level1", self.level1_epochs, self.level1_lr),
                                  ("level2", self.level2_epochs, self.level2_lr)):
                self.history_ += self.trainer_.train_stage(stage, data, self._schedule(ep, lr))
        self.history_ += self.trainer_.train_stage("joint", data, self._schedule(self.joint_epochs, self.joint_lr))
        self.n_frames_ = X.shape[2]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        return self.trainer_.predict_logits(check_clips(X))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        X = check_clips(X)
        if self.trainer_.net.motion:
            return self.trainer_.motion_features(X, self.feature_level)
        with tn.no_grad():
            return np.concatenate([
                self.trainer_.net.forward(X[i: i + 16], mode="baseline", upto=self.feature_level,
                                          logits=False).features[self.feature_level].data.mean(axis=(2, 3, 4))
                for i in range(0, len(X), 16)])


class CosineKNNClassifier(ClassifierMixin, BaseEstimator):
    """k-nearest neighbours under cosine similarity; ties go to the nearest tied class."""

    def __init__(self, n_neighbors: int = 5):
        self.n_neighbors = n_neighbors

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"expected {len(X)} labels, got {len(y)}")
        if len(X) == 0:
            raise ValueError("knn needs a non-empty training set")
        self.classes_ = np.unique(y)
        self.X_, self.y_ = X, y
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "X_")
        X = check_features(X, self.n_features_in_)
        return knn_predict(self.X_, self.y_, X, self.n_neighbors)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Softmax regression on standardised frozen features, trained by full-batch SGD."""

    def __init__(self, epochs: int = 200, lr: float = 0.1, random_state: int = 0):
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"expected {len(X)} labels, got {len(y)}")
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.model_ = fit_linear(X, y_enc, len(self.classes_), self.epochs, self.lr, self.random_state)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.decision(check_features(X, self.n_features_in_))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.decision_function(X).argmax(axis=1)]
