"""scikit-learn style front ends for the coupled VAE and the full GZSDA pipeline.

Both estimators take the usual ``(X, y)`` plus a per-row ``domain`` array
(0 = source, 1 = target). Classes that appear in the target rows are the seen
classes; every other source class is unseen.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .ccvae import SOURCE, TARGET, CcvaeModel, TrainConfig, encode, generate_cross_domain, train
from .classify import LinearClassifier
from .data import FeatureDataset, GzsdaTask, SplitSpec
from .nn import make_rng
from .seeding import derive_seed


def _check_domain(domain, n):
    if domain is None:
        raise ValueError("a per-row domain array (0 = source, 1 = target) is required")
    domain = np.asarray(domain)
    if domain.shape != (n,) or not np.isin(domain, (SOURCE, TARGET)).all():
        raise ValueError(f"domain must be a length-{n} array of 0/1 values")
    return domain.astype(np.uint8)


def task_from_arrays(X, y, domain) -> GzsdaTask:
    X, y = check_X_y(X, y, dtype=np.float64)
    domain = _check_domain(domain, len(X))
    src, tgt = domain == SOURCE, domain == TARGET
    source = FeatureDataset(X[src], y[src], SOURCE)
    target = FeatureDataset(X[tgt], y[tgt], TARGET, X.shape[1])
    seen = set(np.unique(target.labels).tolist())
    classes = set(np.unique(y).tolist())
    if not seen <= set(np.unique(source.labels).tolist()):
        raise ValueError("every target class needs labelled source samples")
    split = SplitSpec(sorted(seen), sorted(classes - seen))
    empty = target.subset(np.zeros(0, dtype=np.int64))
    return GzsdaTask(source, target, empty, split)


class CoupledCVAE(TransformerMixin, BaseEstimator):
    """Shared-weight, domain-conditioned VAE trained on same-class source/target pairs.

    ``transform`` returns posterior means; ``generate`` produces features in
    another domain by decoding a (sampled or mean) latent code.
    """

    def __init__(
        self,
        hidden=512,
        latent_dim=64,
        epochs=50,
        batch_size=64,
        learning_rate=1e-3,
        lambda_max=0.2,
        warmup_fraction=0.2,
        scale_features=True,
        random_state=0,
    ):
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_max = lambda_max
        self.warmup_fraction = warmup_fraction
        self.scale_features = scale_features
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=derive_seed(self.random_state, "ccvae-train"),
            lambda_max=self.lambda_max,
            warmup_fraction=self.warmup_fraction,
        )

    def fit(self, X, y, domain=None):
        return self.fit_task(task_from_arrays(X, y, domain))

    def fit_task(self, task: GzsdaTask):
        pooled = np.vstack([task.source_train.features, task.target_train.features])
        self.mean_ = pooled.mean(axis=0) if self.scale_features else np.zeros(pooled.shape[1])
        self.scale_ = pooled.std(axis=0) if self.scale_features else np.ones(pooled.shape[1])
        self.scale_[self.scale_ == 0] = 1.0
        scaled = replace(
            task,
            source_train=self._scaled(task.source_train),
            target_train=self._scaled(task.target_train),
            _by_class=None,
        )
        init_rng = make_rng(derive_seed(self.random_state, "ccvae-init"))
        model = CcvaeModel(task.source_train.feature_dim, self.hidden, self.latent_dim, init_rng)
        self.model_, self.history_ = train(model, scaled, self.train_config())
        self.n_features_in_ = model.feature_dim
        return self

    def _scaled(self, ds: FeatureDataset) -> FeatureDataset:
        return FeatureDataset((ds.features - self.mean_) / self.scale_, ds.labels, ds.domains, ds.feature_dim)

    def transform(self, X, domain=SOURCE):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        mu, _ = encode(self.model_, (X - self.mean_) / self.scale_, domain)
        return mu

    def generate(self, X, from_domain=SOURCE, to_domain=TARGET, random_state=None, deterministic=False):
        """Synthetic features in ``to_domain``, one per input row, in input units."""
        check_is_fitted(self, "model_")
        rng = make_rng(derive_seed(self.random_state, "generate") if random_state is None else random_state)
        return self._generate(check_array(X, dtype=np.float64), from_domain, to_domain, rng, deterministic)

    def _generate(self, X, from_domain, to_domain, rng, deterministic):
        out = generate_cross_domain(self.model_, (X - self.mean_) / self.scale_, from_domain, to_domain, rng, deterministic)
        return out * self.scale_ + self.mean_


def generation_budget(task: GzsdaTask) -> int:
    """Median per-class count of the seen-class target training samples."""
    counts = np.bincount(task.target_train.labels)
    counts = counts[counts > 0]
    return int(np.floor(np.median(counts))) if len(counts) else 0


def synthesize(cvae: CoupledCVAE, task: GzsdaTask, budget: int, rng, source_augmentation=True, deterministic=False):
    """Synthetic training rows for the unified classifier.

    Returns ``(features, labels, provenance)`` holding ``budget`` target-domain
    rows per unseen class and, with ``source_augmentation``, ``budget``
    source-domain rows per class. Inputs are source rows of the class drawn
    uniformly with replacement.
    """
    src = task.source_train
    feats, labels, tags = [], [], []
    jobs = [(c, TARGET, "synth_target") for c in task.split.unseen_classes]
    if source_augmentation:
        jobs += [(c, SOURCE, "synth_source") for c in task.split.classes]
    for c, to_domain, tag in jobs:
        rows = np.flatnonzero(src.labels == c)
        if budget == 0 or len(rows) == 0:
            continue
        picks = rows[rng.integers(0, len(rows), size=budget)]
        feats.append(cvae._generate(src.features[picks], SOURCE, to_domain, rng, deterministic))
        labels.append(np.full(budget, c, dtype=np.int64))
        tags += [tag] * budget
    if not feats:
        return np.zeros((0, src.feature_dim)), np.zeros(0, dtype=np.int64), []
    return np.vstack(feats), np.concatenate(labels), tags


class GzsdaClassifier(ClassifierMixin, BaseEstimator):
    """Three-step pipeline: coupled VAE, synthetic features, unified linear classifier.

    Parameters mirror ``CoupledCVAE`` (prefixed where ambiguous) plus the
    classifier settings. ``budget=None`` uses the median seen-class target count.
    """

    def __init__(
        self,
        hidden=512,
        latent_dim=64,
        epochs=50,
        batch_size=64,
        learning_rate=1e-3,
        lambda_max=0.2,
        warmup_fraction=0.2,
        scale_features=True,
        classifier_epochs=200,
        classifier_learning_rate=1e-3,
        standardize=False,
        budget=None,
        source_augmentation=True,
        deterministic_mu=False,
        random_state=0,
    ):
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lambda_max = lambda_max
        self.warmup_fraction = warmup_fraction
        self.scale_features = scale_features
        self.classifier_epochs = classifier_epochs
        self.classifier_learning_rate = classifier_learning_rate
        self.standardize = standardize
        self.budget = budget
        self.source_augmentation = source_augmentation
        self.deterministic_mu = deterministic_mu
        self.random_state = random_state

    def fit(self, X, y, domain=None):
        return self.fit_task(task_from_arrays(X, y, domain))

    def fit_task(self, task: GzsdaTask, num_classes=None):
        self.cvae_ = CoupledCVAE(
            self.hidden, self.latent_dim, self.epochs, self.batch_size, self.learning_rate,
            self.lambda_max, self.warmup_fraction, self.scale_features, derive_seed(self.random_state, "ccvae"),
        ).fit_task(task)
        budget = generation_budget(task) if self.budget is None else int(self.budget)
        rng = make_rng(derive_seed(self.random_state, "synthesize"))
        gx, gy, tags = synthesize(self.cvae_, task, budget, rng, self.source_augmentation, self.deterministic_mu)
        X = np.vstack([task.source_train.features, task.target_train.features, gx])
        y = np.concatenate([task.source_train.labels, task.target_train.labels, gy])
        provenance = ["real_source"] * len(task.source_train) + ["real_target"] * len(task.target_train) + tags
        self.train_counts_ = {tag: provenance.count(tag) for tag in ("real_source", "real_target", "synth_target", "synth_source")}
        if num_classes is None:
            num_classes = max(task.split.classes) + 1
        self.classifier_ = LinearClassifier(
            num_classes, self.classifier_epochs, self.classifier_learning_rate, self.standardize,
            random_state=derive_seed(self.random_state, "classifier"),
        ).fit(X, y)
        self.classes_ = self.classifier_.classes_
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "classifier_")
        return self.classifier_.predict(X)
