"""scikit-learn interface to the fusion classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .backbones import KINDS
from .data import Dataset
from .errors import DataError
from .fusion import FusionModel, default_specs
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, evaluate, predict_log_probs, train


def _as_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_2d=False)
    if X.ndim == 3:
        X = X[:, None, :, :]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images of shape (n, H, W) or (n, 1, H, W), got {X.shape}")
    return X


class FusionClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Binary image classifier fusing parallel convolutional backbones.

    ``fit`` trains with Adam; when validation images are passed the epoch
    with the best validation accuracy is kept, otherwise the last one.
    ``transform`` returns the concatenated backbone features.

    Parameters
    ----------
    kinds : tuple of str
        Backbones to fuse, in concatenation order. A single kind gives the
        corresponding stand-alone baseline.
    feature_dim : int
        Width F of each backbone's feature vector.
    hidden : int
        Width of the hidden head layer.
    class_count : int
        Output width; labels occupy the first two outputs.
    dropout_p, batch_size, learning_rate, epochs, seed
        Training hyperparameters.
    """

    def __init__(
        self,
        kinds=KINDS,
        feature_dim=1000,
        hidden=512,
        class_count=2,
        dropout_p=0.2,
        batch_size=16,
        learning_rate=0.003,
        epochs=50,
        seed=0,
    ):
        self.kinds = kinds
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.class_count = class_count
        self.dropout_p = dropout_p
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y):
            raise DataError("labels outside the classes seen during fit")
        return idx

    def fit(self, X, y, X_val=None, y_val=None):
        X = _as_images(X)
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"FusionClassifier is binary; got classes {self.classes_.tolist()}")
        self.model_ = FusionModel(
            default_specs(self.feature_dim, X.shape[2:], kinds=tuple(self.kinds)),
            class_count=self.class_count,
            hidden=self.hidden,
            dropout_p=self.dropout_p,
            seed=self.seed,
        )
        has_val = X_val is not None
        config = TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.seed,
            dropout_p=self.dropout_p,
            class_count=self.class_count,
            select_best=has_val,
        )
        val = Dataset(_as_images(X_val), self._encode(np.asarray(y_val))) if has_val else None
        self.checkpoint_, self.record_ = train(self.model_, Dataset(X, self._encode(y)), val, config)
        self.best_epoch_ = self.record_.best_epoch
        return self

    def _log_probs(self, X):
        check_is_fitted(self, "model_")
        return predict_log_probs(self.model_, _as_images(X))

    def predict_proba(self, X):
        lp = self._log_probs(X)[:, :2].astype(np.float64)
        p = np.exp(lp - lp.max(axis=1, keepdims=True))
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        lp = self._log_probs(X)
        return self.classes_[(lp[:, 1] > lp[:, 0]).astype(int)]

    def transform(self, X):
        """Concatenated (n, len(kinds) * feature_dim) backbone features."""
        check_is_fitted(self, "model_")
        X = _as_images(X)
        with no_grad():
            return self.model_.features(Tensor(X)).data.copy()

    def evaluate(self, X, y):
        """Confusion matrix, metric report and scores (``trainer.evaluate``)."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, Dataset(_as_images(X), self._encode(np.asarray(y))))
