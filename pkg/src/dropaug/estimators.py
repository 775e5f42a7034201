"""Estimator facade: fit/predict/transform wrappers over the toolkit.

These classes follow the scikit-learn parameter contract (plain __init__
assignment, get_params/set_params, clone-ability) so they drop into
Pipelines and grid searches. The heavy lifting stays in the functional
modules; only array validation and bookkeeping live here.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backprojection import BackProjectionConfig
from .data import Dataset, pca_fit, pca_inverse_transform, pca_transform
from .errors import ConfigError, DomainError, ShapeError
from .linalg import RngStream
from .network import forward, init_model
from .noise import NoiseScheme
from .training import (
    BP_STREAM,
    GAUSS_STREAM,
    INIT_STREAM,
    MASK_STREAM,
    SHUFFLE_STREAM,
    ExperimentConfig,
    _generate_x_star,
    _one_epoch,
)


def check_matrix(x, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 matrix with at least one row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DomainError(f"{name} contains non-finite values")
    return x


def check_label_vector(y, n_rows: int, name: str = "y") -> np.ndarray:
    """Coerce to a 1-D label vector matching the sample count."""
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != n_rows:
        raise ShapeError(f"{name} has {y.shape[0]} entries for {n_rows} samples")
    return y


class MlpNoiseClassifier(BaseEstimator, ClassifierMixin):
    """Feedforward softmax classifier trained under a noise scheme.

    ``noise`` selects the corruption: "none", "dropout" (p_input /
    p_hidden), "random_dropout" (p_max_input / p_max_hidden), or
    "gaussian_matched". Evaluation is always noiseless; the default
    scaling makes that a no-op.
    """

    def __init__(self, hidden_dims=(64,), noise="none", p_input=0.0,
                 p_hidden=0.0, p_max_input=0.0, p_max_hidden=0.0,
                 scaling="train_time_inverse", epochs=20, batch_size=100,
                 lr=0.1, seed=0, hidden_bias=True):
        self.hidden_dims = hidden_dims
        self.noise = noise
        self.p_input = p_input
        self.p_hidden = p_hidden
        self.p_max_input = p_max_input
        self.p_max_hidden = p_max_hidden
        self.scaling = scaling
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.hidden_bias = hidden_bias

    def _scheme(self) -> NoiseScheme:
        return NoiseScheme(
            kind=self.noise, p_input=self.p_input, p_hidden=self.p_hidden,
            p_max_input=self.p_max_input, p_max_hidden=self.p_max_hidden,
            scaling=self.scaling,
        ).validate()

    def fit(self, X, y):
        X = check_matrix(X)
        y = check_label_vector(y, X.shape[0])
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ConfigError("need at least two classes to fit a classifier")
        dims = (X.shape[1], *[int(d) for d in self.hidden_dims],
                self.classes_.shape[0])
        config = ExperimentConfig(
            layer_dims=dims, scheme=self._scheme(), epochs=int(self.epochs),
            batch_size=int(self.batch_size), lr=float(self.lr),
            seed=int(self.seed), hidden_bias=bool(self.hidden_bias),
        ).validate()
        model = init_model(dims, RngStream(config.seed, INIT_STREAM),
                           hidden_bias=config.hidden_bias)
        shuffle = RngStream(config.seed, SHUFFLE_STREAM)
        masks = RngStream(config.seed, MASK_STREAM)
        gauss = RngStream(config.seed, GAUSS_STREAM)
        losses = []
        y_codes = y_idx.astype(np.int64)
        for e in range(config.epochs):
            model, loss = _one_epoch(model, X, y_codes, config, config.scheme,
                                     shuffle, masks, gauss, e)
            losses.append(loss)
        self.model_ = model
        self.train_losses_ = losses
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        return forward(self.model_, X).probabilities

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]


class PcaReducer(BaseEstimator, TransformerMixin):
    """Top-k principal components without whitening.

    Projections keep their raw variances (the eigenvalues), matching the
    convention of feeding unwhitened PCA features to a classifier.
    """

    def __init__(self, n_components=2):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_matrix(X)
        data = Dataset(features=X, labels=np.zeros(X.shape[0], dtype=np.int64))
        self.transform_ = pca_fit(data, int(self.n_components))
        self.mean_ = self.transform_.mean.ravel()
        self.components_ = self.transform_.components.T
        self.explained_variance_ = self.transform_.eigenvalues.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return pca_transform(self.transform_, check_matrix(X))

    def inverse_transform(self, Z):
        check_is_fitted(self, "transform_")
        return pca_inverse_transform(self.transform_, check_matrix(Z, name="Z"))


class BackProjectionAugmenter(BaseEstimator, TransformerMixin):
    """Generate noise-matching inputs from a classifier fitted alongside.

    ``fit`` trains an internal MlpNoiseClassifier on (X, y); ``transform``
    draws fresh masks per row (deterministic in ``seed``), freezes the
    noisy hidden activations, and descends each input toward them. The
    default joint_shared mode keeps one row per sample; the distinct
    modes stack one row per (sample, hidden layer).
    """

    def __init__(self, hidden_dims=(64,), noise="dropout", p_input=0.2,
                 p_hidden=0.5, scaling="train_time_inverse", epochs=20,
                 batch_size=100, lr=0.1, steps=20, bp_lr=300.0,
                 mode="joint_shared", clip_range=None, seed=0):
        self.hidden_dims = hidden_dims
        self.noise = noise
        self.p_input = p_input
        self.p_hidden = p_hidden
        self.scaling = scaling
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.steps = steps
        self.bp_lr = bp_lr
        self.mode = mode
        self.clip_range = clip_range
        self.seed = seed

    def fit(self, X, y):
        clf = MlpNoiseClassifier(
            hidden_dims=self.hidden_dims, noise=self.noise,
            p_input=self.p_input, p_hidden=self.p_hidden,
            scaling=self.scaling, epochs=self.epochs,
            batch_size=self.batch_size, lr=self.lr, seed=self.seed,
        )
        self.classifier_ = clf.fit(X, y)
        self.n_features_in_ = self.classifier_.n_features_in_
        return self

    def transform(self, X):
        check_is_fitted(self, "classifier_")
        X = check_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"X has {X.shape[1]} features, expected "
                             f"{self.n_features_in_}")
        model = self.classifier_.model_
        bp = BackProjectionConfig(
            steps=int(self.steps), mode=self.mode, joint_lr=float(self.bp_lr),
            lr_per_layer=tuple([float(self.bp_lr)] * max(1, model.hidden_count)),
            clip_range=self.clip_range,
        ).validate_for(model)
        config = ExperimentConfig(
            layer_dims=tuple(model.layer_dims),
            scheme=self.classifier_._scheme(), bp_config=bp,
        )
        dummy = np.zeros(X.shape[0], dtype=np.int64)
        xs, _ = _generate_x_star(model, X, dummy, config,
                                 RngStream(int(self.seed), BP_STREAM), 0)
        return xs
