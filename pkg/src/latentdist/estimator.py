"""scikit-learn compatible classifier wrapping the multi-branch trainer."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted, validate_data

from .datagen import dataset_from_arrays
from .trainer import TrainConfig, train

__all__ = ["LatentDistributionClassifier"]


class LatentDistributionClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained with mined latent label distributions and confidence-scaled logits.

    Parameters mirror :class:`latentdist.trainer.TrainConfig`; ``random_state``
    seeds initialisation and batch sampling. After ``fit`` only the target
    branch is used for prediction. ``latent_distribution`` and
    ``confidence`` expose the training-time heads for inspection.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    model_ : BranchSet
    history_ : list of MetricRecord, one per epoch
    """

    def __init__(self, *, hidden_dim=32, head_dim=16, max_epoch=40, iters_per_epoch=None, batch_size=72,
                 lr=1e-3, lr_decay_epochs=(10, 20), lr_decay_factor=0.1, weight_decay=1e-4,
                 sharpen_t=1.2, omega=0.5, gamma=1e3, beta=6, use_latent=True, use_sp=True,
                 use_confidence=True, random_state=0):
        self.hidden_dim = hidden_dim
        self.head_dim = head_dim
        self.max_epoch = max_epoch
        self.iters_per_epoch = iters_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay_epochs = lr_decay_epochs
        self.lr_decay_factor = lr_decay_factor
        self.weight_decay = weight_decay
        self.sharpen_t = sharpen_t
        self.omega = omega
        self.gamma = gamma
        self.beta = beta
        self.use_latent = use_latent
        self.use_sp = use_sp
        self.use_confidence = use_confidence
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        params = {k: v for k, v in self.get_params().items() if k in names}
        params["lr_decay_epochs"] = tuple(self.lr_decay_epochs)
        return TrainConfig(seed=int(self.random_state or 0), **params)

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples from at least two classes")
        batch = min(self.batch_size, len(X))
        config = dataclasses.replace(self._config(), batch_size=batch)
        dataset = dataset_from_arrays(X, encoded, len(self.classes_))
        self.model_, self.history_ = train(dataset, config)
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return validate_data(self, X, dtype=np.float64, reset=False)

    def decision_function(self, X) -> np.ndarray:
        X = self._check(X)
        return self.model_.target_logits(X)

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        return self.model_.predict_proba(X)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise ValueError("labels contain classes not seen during fit")
        return idx

    def latent_distribution(self, X, y) -> np.ndarray:
        """Mined distribution over the classes other than ``y``, in ascending class order."""
        X = self._check(X)
        return self.model_.latent_distribution(X, self._encode(y))

    def confidence(self, X, y) -> np.ndarray:
        """Confidence scores of a batch (every class must be present in ``y``)."""
        X = self._check(X)
        return self.model_.confidence(X, self._encode(y))

    def deployment_model(self):
        check_is_fitted(self, "model_")
        return self.model_.strip()

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.non_deterministic = False
        return tags
