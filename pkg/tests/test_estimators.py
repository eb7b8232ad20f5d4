import numpy as np
import pytest
from sklearn.base import clone

from gzsda.ccvae import SOURCE, TARGET
from gzsda.data import SplitSpec, SyntheticConfig, gen_synthetic_benchmark, make_task
from gzsda.estimators import CoupledCVAE, GzsdaClassifier, generation_budget, synthesize, task_from_arrays
from gzsda.nn import make_rng


@pytest.fixture(scope="module")
def arrays():
    src, tgt = gen_synthetic_benchmark(SyntheticConfig(num_classes=4, feature_dim=8, samples_per_class_per_domain=40, seed=3))
    keep = np.isin(tgt.labels, [0, 1])
    X = np.vstack([src.features, tgt.features[keep]])
    y = np.concatenate([src.labels, tgt.labels[keep]])
    domain = np.concatenate([np.zeros(len(src), int), np.ones(keep.sum(), int)])
    return X, y, domain, tgt


@pytest.fixture(scope="module")
def fitted(arrays):
    X, y, domain, _ = arrays
    return CoupledCVAE(hidden=32, latent_dim=4, epochs=30, random_state=1).fit(X, y, domain)


def test_task_from_arrays(arrays):
    X, y, domain, _ = arrays
    task = task_from_arrays(X, y, domain)
    assert task.split.seen_classes == (0, 1) and task.split.unseen_classes == (2, 3)
    assert len(task.source_train) == 160 and len(task.target_train) == 80


def test_domain_required(arrays):
    X, y, _, _ = arrays
    with pytest.raises(ValueError, match="domain"):
        CoupledCVAE().fit(X, y)
    with pytest.raises(ValueError):
        CoupledCVAE().fit(X, y, np.full(len(y), 2))


def test_get_params_and_clone():
    est = GzsdaClassifier(epochs=7, budget=3)
    params = clone(est).get_params()
    assert params["epochs"] == 7 and params["budget"] == 3
    assert clone(CoupledCVAE(latent_dim=5)).get_params()["latent_dim"] == 5


def test_transform_shape(fitted, arrays):
    X = arrays[0]
    assert fitted.transform(X[:5]).shape == (5, 4)


def test_generate_is_deterministic_given_seed(fitted, arrays):
    X = arrays[0][:10]
    a = fitted.generate(X, random_state=4)
    b = fitted.generate(X, random_state=4)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(fitted.generate(X, deterministic=True), fitted.generate(X, deterministic=True, random_state=9))


def test_within_domain_reconstruction_beats_cross_domain_copy(fitted, arrays):
    """Decoding into the input's own domain approximates it better than raw cross-domain copies do."""
    X, y, domain, tgt = arrays
    src_rows = X[domain == 0]
    recon = fitted.generate(src_rows, SOURCE, SOURCE, deterministic=True)
    within = np.mean(np.sum((recon - src_rows) ** 2, axis=1))
    cross = np.mean(np.sum((tgt.features - src_rows) ** 2, axis=1))
    assert within < cross


def test_cross_domain_generation_lands_near_target_class(fitted, arrays):
    X, y, domain, tgt = arrays
    for c in (0, 1):
        gen = fitted.generate(X[(domain == 0) & (y == c)], SOURCE, TARGET, deterministic=True)
        centroids = np.array([tgt.features[tgt.labels == k].mean(axis=0) for k in range(4)])
        nearest = np.argmin(((gen.mean(axis=0) - centroids) ** 2).sum(axis=1))
        assert nearest == c


def test_synthesize_counts(fitted, arrays):
    X, y, domain, _ = arrays
    task = task_from_arrays(X, y, domain)
    budget = generation_budget(task)
    assert budget == 40
    gx, gy, tags = synthesize(fitted, task, 3, make_rng(0))
    assert np.bincount(gy).tolist() == [3, 3, 6, 6]
    assert tags.count("synth_target") == 6 and tags.count("synth_source") == 12
    gx, gy, tags = synthesize(fitted, task, 3, make_rng(0), source_augmentation=False)
    assert set(gy) == {2, 3}
    gx, gy, tags = synthesize(fitted, task, 0, make_rng(0))
    assert gx.shape == (0, 8) and not tags


def test_pipeline_fit_predict(arrays):
    X, y, domain, tgt = arrays
    clf = GzsdaClassifier(hidden=32, latent_dim=4, epochs=5, classifier_epochs=20, random_state=0).fit(X, y, domain)
    assert clf.predict(tgt.features).shape == (len(tgt),)
    assert set(clf.train_counts_) == {"real_source", "real_target", "synth_target", "synth_source"}
    again = GzsdaClassifier(hidden=32, latent_dim=4, epochs=5, classifier_epochs=20, random_state=0).fit(X, y, domain)
    np.testing.assert_array_equal(clf.classifier_.weights_.value, again.classifier_.weights_.value)


def test_constant_feature_is_safe(arrays):
    X, y, domain, _ = arrays
    X = X.copy()
    X[:, 0] = 3.0
    est = CoupledCVAE(hidden=8, latent_dim=2, epochs=1).fit(X, y, domain)
    assert est.scale_[0] == 1.0
    assert np.isfinite(est.generate(X[:3])).all()
