"""Classifiers used after feature generation and by the baselines.

``LinearClassifier`` is a single affine map to logits trained with full-batch
Adam on mean softmax cross-entropy. ``NearestNeighborClassifier`` is 1NN under
Euclidean distance with ties going to the lowest training index.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .ccvae import _assign, _pack_checkpoint, _unpack_checkpoint
from .nn import AdamConfig, Parameter, ShapeError, adam_step, glorot_uniform, make_rng, softmax_cross_entropy

CLASSIFIER_MAGIC = b"LINC1"
PROVENANCES = ("real_source", "real_target", "synth_target", "synth_source")


def predict_logits(weights: np.ndarray, bias: np.ndarray, features: np.ndarray) -> np.ndarray:
    if features.ndim != 2 or features.shape[1] != weights.shape[0]:
        raise ShapeError(f"classifier expects {weights.shape[0]} features, got shape {features.shape}")
    return features @ weights + bias


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    return np.argmax(logits, axis=1)


class LinearClassifier(ClassifierMixin, BaseEstimator):
    """Softmax regression trained with full-batch Adam.

    Parameters
    ----------
    num_classes : int, optional
        Size of the label space. Defaults to ``max(y) + 1``.
    epochs : int
        Number of full-batch Adam steps.
    learning_rate : float
    standardize : bool
        Standardise each feature with training-set statistics before the affine map.
    init : {"zeros", "glorot"}
        Weight initialisation. The objective is convex, so zeros is the default.
    random_state : int
        Seed for ``init="glorot"``.
    """

    def __init__(self, num_classes=None, epochs=200, learning_rate=1e-3, standardize=False, init="zeros", random_state=0):
        self.num_classes = num_classes
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.standardize = standardize
        self.init = init
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        num_classes = self.num_classes if self.num_classes is not None else int(y.max()) + 1
        if y.min() < 0 or y.max() >= num_classes:
            raise ValueError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.arange(num_classes)
        if self.standardize:
            self.mean_ = X.mean(axis=0)
            self.scale_ = X.std(axis=0)
            self.scale_[self.scale_ == 0] = 1.0
            X = (X - self.mean_) / self.scale_
        if self.init == "zeros":
            w = np.zeros((X.shape[1], num_classes))
        elif self.init == "glorot":
            w = glorot_uniform(X.shape[1], num_classes, make_rng(self.random_state))
        else:
            raise ValueError(f"init must be 'zeros' or 'glorot', got {self.init!r}")
        self.weights_ = Parameter(w, "classifier.weight")
        self.bias_ = Parameter(np.zeros((1, num_classes)), "classifier.bias")
        adam = AdamConfig(learning_rate=self.learning_rate)
        self.loss_curve_ = []
        for _ in range(self.epochs):
            loss, g = softmax_cross_entropy(X @ self.weights_.value + self.bias_.value, y)
            self.weights_.grad += X.T @ g
            self.bias_.grad += g.sum(axis=0, keepdims=True)
            adam_step([self.weights_, self.bias_], adam)
            self.loss_curve_.append(loss)
        return self

    def _prepare(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"classifier expects {self.n_features_in_} features, got {X.shape[1]}")
        if self.standardize:
            X = (X - self.mean_) / self.scale_
        return X

    def decision_function(self, X):
        return predict_logits(self.weights_.value, self.bias_.value, self._prepare(X))

    def predict(self, X):
        return argmax_lowest(self.decision_function(X))

    def loss(self, X, y) -> float:
        return softmax_cross_entropy(self.decision_function(X), np.asarray(y))[0]

    def save(self, path, config: dict | None = None) -> None:
        check_is_fitted(self, "weights_")
        header = {
            "num_features": int(self.n_features_in_),
            "num_classes": len(self.classes_),
            "standardize": bool(self.standardize),
            "layers": [[p.name, list(p.shape)] for p in self._saved_params()],
            "params": self.get_params(),
            "config": config or {},
        }
        with open(path, "wb") as fh:
            fh.write(_pack_checkpoint(CLASSIFIER_MAGIC, header, self._saved_params()))

    def _saved_params(self):
        params = [self.weights_, self.bias_]
        if self.standardize:
            params += [Parameter(self.mean_[None, :], "classifier.mean"), Parameter(self.scale_[None, :], "classifier.scale")]
        return params

    @classmethod
    def load(cls, path) -> "LinearClassifier":
        with open(path, "rb") as fh:
            header, payload = _unpack_checkpoint(CLASSIFIER_MAGIC, fh.read())
        clf = cls(**header["params"])
        d, c = header["num_features"], header["num_classes"]
        clf.n_features_in_ = d
        clf.classes_ = np.arange(c)
        clf.weights_ = Parameter(np.zeros((d, c)), "classifier.weight")
        clf.bias_ = Parameter(np.zeros((1, c)), "classifier.bias")
        params = [clf.weights_, clf.bias_]
        if header["standardize"]:
            params += [Parameter(np.zeros((1, d)), "classifier.mean"), Parameter(np.zeros((1, d)), "classifier.scale")]
        _assign(params, header, payload)
        if header["standardize"]:
            clf.mean_, clf.scale_ = params[2].value[0], params[3].value[0]
        return clf


def train_linear(features, labels, epochs=200, adam: AdamConfig | None = None, seed=0, num_classes=None, standardize=False) -> LinearClassifier:
    lr = adam.learning_rate if adam is not None else 1e-3
    return LinearClassifier(num_classes, epochs, lr, standardize, random_state=seed).fit(features, labels)


def knn_predict(train_features, train_labels, query, k=1) -> np.ndarray:
    """Label of the nearest training row (Euclidean), lowest index on ties."""
    if k != 1:
        raise ValueError("only k=1 is supported")
    train = np.asarray(train_features, dtype=np.float64)
    labels = np.asarray(train_labels)
    query = np.asarray(query, dtype=np.float64)
    if len(train) == 0:
        raise ValueError("nearest-neighbour prediction needs a nonempty training set")
    if query.ndim != 2 or query.shape[1] != train.shape[1]:
        raise ShapeError(f"query shape {query.shape} does not match training dimension {train.shape[1]}")
    out = np.empty(len(query), dtype=labels.dtype)
    chunk = max(1, 4_000_000 // train.size)
    for start in range(0, len(query), chunk):
        q = query[start : start + chunk]
        # exact squared distances; the expanded |a|^2 - 2ab + |b|^2 form can break ties
        dist = ((q[:, None, :] - train[None, :, :]) ** 2).sum(axis=2)
        out[start : start + chunk] = labels[np.argmin(dist, axis=1)]
    return out


class NearestNeighborClassifier(ClassifierMixin, BaseEstimator):
    """1-nearest-neighbour classifier under Euclidean distance."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.X_, self.y_ = X, y
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "X_")
        return knn_predict(self.X_, self.y_, check_array(X, dtype=np.float64))
