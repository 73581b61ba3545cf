"""scikit-learn style classifier around a hyperbolic-block network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import Dataset
from .network import NetworkConfig, build_network
from .nn import softmax
from .training import TrainConfig, train
from .validation import check_images, check_images_labels


class HyperConvClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier; ``X`` is ``[N, C, H, W]``.

    Architecture defaults are desk-sized (two stages, 8 and 16 channels).
    """

    def __init__(
        self,
        variant: str = "eq3",
        stage_depths=(1, 1),
        stem_channels: int = 8,
        stage_channels=(8, 16),
        expansion: int = 2,
        weight_shared: bool = True,
        batchnorm: bool = True,
        activation: str = "relu",
        activation_placement: str = "at_downsample",
        peak_lr: float = 0.05,
        warmup_epochs: int = 2,
        epochs: int = 20,
        batch_size: int = 32,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        random_state: int = 0,
    ):
        self.variant = variant
        self.stage_depths = stage_depths
        self.stem_channels = stem_channels
        self.stage_channels = stage_channels
        self.expansion = expansion
        self.weight_shared = weight_shared
        self.batchnorm = batchnorm
        self.activation = activation
        self.activation_placement = activation_placement
        self.peak_lr = peak_lr
        self.warmup_epochs = warmup_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.random_state = random_state

    def _network_config(self, X: np.ndarray, n_classes: int) -> NetworkConfig:
        return NetworkConfig(
            variant=self.variant,
            stage_depths=tuple(self.stage_depths),
            stem_channels=self.stem_channels,
            stage_channels=tuple(self.stage_channels),
            num_classes=max(2, n_classes),
            in_channels=X.shape[1],
            image_size=X.shape[2],
            expansion=self.expansion,
            weight_shared=self.weight_shared,
            batchnorm=self.batchnorm,
            activation=self.activation,
            activation_placement=self.activation_placement,
        )

    def fit(self, X, y):
        X, y = check_images_labels(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        cfg = self._network_config(X, len(self.classes_))
        tcfg = TrainConfig(
            peak_lr=self.peak_lr,
            warmup_epochs=self.warmup_epochs,
            total_epochs=self.epochs,
            batch_size=self.batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.random_state,
        )
        self.model_ = build_network(cfg, seed=self.random_state)
        result = train(self.model_, Dataset(X, encoded, len(self.classes_)), tcfg)
        self.history_ = result.metrics
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, channels=self.model_.config.in_channels)
        return self.model_.predict_logits(X)[:, : len(self.classes_)]

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
