import numpy as np
import pytest
from hypothesis import given, strategies as st

from gzsda.data import SplitSpec, SyntheticConfig, gen_synthetic_benchmark, make_task
from gzsda.evaluate import (
    EvalReport,
    PipelineConfig,
    aggregate,
    harmonic_mean,
    harmonic_summary,
    per_class_accuracy,
    run_method,
)
from gzsda.nn import make_rng


def report(method, split_id, acc_seen, acc_unseen, h=None, pipeline=None):
    return EvalReport(method, split_id, {}, acc_seen, acc_unseen, harmonic_mean(acc_seen, acc_unseen) if h is None else h, {"pipeline": pipeline or {}})


class TestPerClassAccuracy:
    def test_all_correct(self):
        labels = np.array([0, 1, 1, 2])
        assert per_class_accuracy(labels, labels) == {0: 1.0, 1: 1.0, 2: 1.0}

    def test_constant_predictor(self):
        assert per_class_accuracy(np.zeros(4, int), np.array([0, 0, 1, 1])) == {0: 1.0, 1: 0.0}

    def test_matches_tally(self):
        rng = make_rng(0)
        labels, preds = rng.integers(0, 5, 300), rng.integers(0, 5, 300)
        hits, totals = {}, {}
        for p, y in zip(preds, labels):
            totals[y] = totals.get(y, 0) + 1
            hits[y] = hits.get(y, 0) + int(p == y)
        acc = per_class_accuracy(preds, labels)
        assert acc == {int(c): hits[c] / totals[c] for c in totals}

    def test_permutation_invariance(self):
        rng = make_rng(1)
        labels, preds = rng.integers(0, 4, 50), rng.integers(0, 4, 50)
        perm = rng.permutation(50)
        assert per_class_accuracy(preds, labels) == per_class_accuracy(preds[perm], labels[perm])

    def test_imbalance_invariance(self):
        labels = np.array([0, 0, 1, 1, 1])
        preds = np.array([0, 1, 1, 1, 0])
        doubled = per_class_accuracy(np.concatenate([preds, preds[:2]]), np.concatenate([labels, labels[:2]]))
        assert doubled == per_class_accuracy(preds, labels)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            per_class_accuracy([0, 1], [0])


class TestHarmonic:
    split = SplitSpec([0, 1], [2, 3])

    def test_equal(self):
        assert harmonic_summary({0: 0.8, 1: 0.8, 2: 0.8, 3: 0.8}, self.split)[2] == pytest.approx(0.8, abs=1e-12)

    def test_zero_unseen(self):
        assert harmonic_summary({0: 0.9, 1: 0.7, 2: 0.0, 3: 0.0}, self.split) == (0.8, 0.0, 0.0)

    def test_derived_value(self):
        assert harmonic_mean(0.7, 0.3) == pytest.approx(0.42, abs=1e-12)

    def test_both_zero(self):
        assert harmonic_mean(0.0, 0.0) == 0.0

    def test_missing_class_excluded(self):
        assert harmonic_summary({0: 1.0, 2: 0.5}, self.split) == (1.0, 0.5, pytest.approx(2 / 3))

    @given(st.floats(0, 1, allow_subnormal=False), st.floats(0, 1, allow_subnormal=False))
    def test_properties(self, a, b):
        h = harmonic_mean(a, b)
        assert 0.0 <= h <= max(a, b) + 1e-15
        assert (h == 0.0) == (a * b == 0.0)


class TestAggregate:
    def test_identical_reports_zero_sem(self):
        agg = aggregate([report("ccvae", i, 0.9, 0.6) for i in range(5)])
        stats = agg.methods["ccvae"]
        assert stats["h"].sem == 0.0 and stats["num_splits"] == 5

    def test_two_splits(self):
        agg = aggregate([report("ccvae", 0, 0.5, 0.5, h=0.2), report("ccvae", 1, 0.5, 0.5, h=0.4)])
        assert agg.methods["ccvae"]["h"].mean == pytest.approx(0.3, abs=1e-12)
        assert agg.methods["ccvae"]["h"].sem == pytest.approx(0.1, abs=1e-12)

    def test_single_split_has_no_sem(self):
        agg = aggregate([report("baseline_nn", 0, 0.9, 0.1)])
        assert agg.methods["baseline_nn"]["h"].sem is None
        assert ",," not in agg.to_csv().splitlines()[0]
        assert agg.to_csv().splitlines()[1].endswith(",")

    def test_h_is_mean_of_split_h(self):
        reports = [report("ccvae", 0, 1.0, 0.0), report("ccvae", 1, 0.0, 1.0)]
        assert aggregate(reports).methods["ccvae"]["h"].mean == 0.0

    def test_inconsistent_configs(self):
        with pytest.raises(ValueError):
            aggregate([report("ccvae", 0, 1, 1, pipeline={"epochs": 1}), report("ccvae", 1, 1, 1, pipeline={"epochs": 2})])

    def test_table_layout(self):
        reports = [report(m, i, 0.5, 0.5) for m in ("ccvae", "source_only") for i in range(2)]
        text = aggregate(reports).to_text().splitlines()
        assert text[0].split()[0] == "Method"
        assert text[2].startswith("Source Only") and text[3].startswith("CCVAE")


@pytest.fixture(scope="module")
def tiny_task():
    src, tgt = gen_synthetic_benchmark(SyntheticConfig(num_classes=4, feature_dim=8, samples_per_class_per_domain=40, seed=1))
    return make_task(src, tgt, SplitSpec([0, 1], [2, 3], 0.5, 5))


FAST = PipelineConfig(hidden=16, latent_dim=4, epochs=5, classifier_epochs=50)


@pytest.mark.parametrize("method", ["source_only", "baseline_1nn", "baseline_nn", "ccvae"])
def test_run_method_deterministic(tiny_task, method):
    a = run_method(method, tiny_task, FAST, 0)
    b = run_method(method, tiny_task, FAST, 0)
    assert a.to_dict() == b.to_dict()
    assert 0 <= a.acc_seen <= 1 and 0 <= a.acc_unseen <= 1
    assert set(a.per_class_acc) == {0, 1, 2, 3}


def test_ccvae_report_counts(tiny_task):
    r = run_method("ccvae", tiny_task, FAST, 0)
    budget = 20  # median of 20 target training rows per seen class
    assert r.train_counts == {"real_source": 160, "real_target": 40, "synth_target": 2 * budget, "synth_source": 4 * budget}


def test_unknown_method(tiny_task):
    with pytest.raises(ValueError):
        run_method("lpp", tiny_task, FAST)


def test_no_shift_control():
    src, tgt = gen_synthetic_benchmark(SyntheticConfig(shift=False, seed=2))
    task = make_task(src, tgt, SplitSpec(range(5), range(5, 10), 0.5, 3))
    r = run_method("source_only", task, PipelineConfig())
    assert abs(r.acc_seen - r.acc_unseen) <= 0.05
