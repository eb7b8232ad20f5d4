"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (lines are printed even
when output capture is on) or ``python3 tests/test_acceptance.py``.
"""

import json
import time

import numpy as np
import pytest

from gzsda.ccvae import CcvaeModel, PairBatch, TrainConfig, ccvae_loss, kl_divergence, load_checkpoint, save_checkpoint, train
from gzsda.classify import knn_predict
from gzsda.cli import main
from gzsda.data import (
    FeatureDataset,
    SplitSpec,
    SyntheticConfig,
    gen_synthetic_benchmark,
    load_dataset,
    make_task,
    save_dataset,
)
from gzsda.evaluate import METHODS, harmonic_summary, metric_stats
from gzsda.nn import grad_check, make_rng


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail

    return report


def perturbed_model(rng, d, hidden, latent):
    model = CcvaeModel(d, hidden, latent, rng)
    for p in model.parameters():
        p.value += 0.1 * rng.standard_normal(p.shape)
    return model


def test_gradient_correctness(verdict):
    start = time.perf_counter()
    rng = make_rng(2024)
    model = perturbed_model(rng, 8, 6, 3)
    valid_t = np.array([True, False, True, True])  # one masked target
    batch = PairBatch(rng.standard_normal((4, 8)), rng.standard_normal((4, 8)), np.array([0, 1, 0, 2]), valid_t)
    eps = (rng.standard_normal((4, 3)), rng.standard_normal((3, 3)))

    def loss():
        return ccvae_loss(model, batch, 0.2, eps=eps)[0].total

    report = grad_check(loss, model.parameters(), h=1e-5, tolerance=1e-4)
    elapsed = time.perf_counter() - start
    ok = report.passed and report.num_coords == model.num_parameters() and elapsed < 10
    verdict(1, "gradient correctness", ok, f"max rel error {report.max_rel_error:.2e} over {report.num_coords} coords, {elapsed:.1f}s")


def test_kl_oracle(verdict):
    start = time.perf_counter()
    zero = kl_divergence(np.zeros((1, 5)), np.zeros((1, 5)))
    rng = make_rng(77)
    worst = 0.0
    for _ in range(20):
        mu = rng.normal(size=(1, 4))
        logvar = rng.uniform(-1.0, 1.0, size=(1, 4))
        std = np.exp(0.5 * logvar)
        z = mu + std * rng.standard_normal((1_000_000, 4))
        # log q(z) - log p(z) for a diagonal Gaussian posterior and standard normal prior
        log_ratio = np.sum(-np.log(std) - 0.5 * ((z - mu) / std) ** 2 + 0.5 * z**2, axis=1)
        estimate = float(log_ratio.mean())
        closed = kl_divergence(mu, logvar)
        worst = max(worst, abs(estimate - closed) / closed)
    elapsed = time.perf_counter() - start
    ok = zero == 0.0 and worst < 0.01 and elapsed < 30
    verdict(2, "KL oracle", ok, f"KL(0,0)={zero!r}, worst Monte-Carlo rel error {worst:.2e}, {elapsed:.1f}s")


def _mean_per_class(pred, labels):
    return float(np.mean([np.mean(pred[labels == c] == c) for c in np.unique(labels)]))


def _benchmark(out, *extra):
    assert main(["benchmark", "--out", str(out), *extra]) == 0
    means = {}
    for method in METHODS:
        reports = [json.loads(p.read_text()) for p in sorted((out / method).glob("*.json"))]
        if reports:
            means[method] = {k: float(np.mean([r[k] for r in reports])) for k in ("acc_seen", "acc_unseen", "h")}
    return means


@pytest.fixture(scope="module")
def default_benchmark(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench") / "a"
    start = time.perf_counter()
    means = _benchmark(out)
    return out, means, time.perf_counter() - start


def test_qualitative_reproduction(verdict, default_benchmark):
    src, tgt = gen_synthetic_benchmark(SyntheticConfig())
    cross = _mean_per_class(knn_predict(src.features, src.labels, tgt.features), tgt.labels)
    idx = make_rng(0).permutation(len(tgt))
    tr, te = idx[: len(idx) // 2], idx[len(idx) // 2 :]
    within = _mean_per_class(knn_predict(tgt.features[tr], tgt.labels[tr], tgt.features[te]), tgt.labels[te])
    certified = cross < 0.40 and within > 0.95

    out, means, elapsed = default_benchmark
    base, ours = means["baseline_nn"], means["ccvae"]
    ok = (
        certified
        and base["acc_seen"] >= 0.90
        and ours["h"] - base["h"] >= 0.15
        and ours["acc_unseen"] >= 0.60
        and elapsed < 300
    )
    detail = (
        f"shift control cross={cross:.3f} within={within:.3f}; "
        f"Baseline(NN) seen={base['acc_seen']:.3f} H={base['h']:.3f}; "
        f"CCVAE unseen={ours['acc_unseen']:.3f} H={ours['h']:.3f}; {elapsed:.0f}s"
    )
    verdict(3, "qualitative reproduction", ok, detail)


def test_no_shift_control(verdict, tmp_path):
    means = _benchmark(tmp_path / "noshift", "--set", "synthetic.shift=false", "--set", 'methods=["source_only"]')
    m = means["source_only"]
    gap = abs(m["acc_seen"] - m["acc_unseen"])
    verdict(4, "no-shift control", gap <= 0.05, f"Source Only seen={m['acc_seen']:.3f} unseen={m['acc_unseen']:.3f} gap={gap:.3f}")


def test_metric_units(verdict):
    split = SplitSpec([0, 1], [2, 3])
    checks = []
    for x in (0.0, 0.25, 0.5, 0.8, 1.0):
        checks.append(abs(harmonic_summary({0: x, 1: x, 2: x, 3: x}, split)[2] - x) <= 1e-12)
        checks.append(harmonic_summary({0: x, 1: x, 2: 0.0, 3: 0.0}, split)[2] == 0.0)
    h = harmonic_summary({0: 0.7, 1: 0.7, 2: 0.3, 3: 0.3}, split)[2]
    sem = metric_stats([0.2, 0.4]).sem
    ok = all(checks) and abs(h - 0.42) <= 1e-12 and abs(sem - 0.1) <= 1e-12
    verdict(5, "metric units", ok, f"H(0.7,0.3)={h!r}, SEM{{0.2,0.4}}={sem!r}, identities {sum(checks)}/{len(checks)}")


def test_benchmark_determinism(verdict, default_benchmark):
    first, _, _ = default_benchmark
    before = (first / "summary.csv").read_bytes()
    _benchmark(first)
    after = (first / "summary.csv").read_bytes()
    verdict(6, "benchmark determinism", before == after, f"summary.csv {len(before)} bytes, identical={before == after}")


def test_mask_exclusion(verdict):
    rng = make_rng(5)
    mismatches, trials = 0, 0
    for trial in range(25):
        d, hidden, latent = int(rng.integers(2, 7)), int(rng.integers(2, 9)), int(rng.integers(1, 5))
        n = int(rng.integers(1, 9))
        model = perturbed_model(rng, d, hidden, latent)
        valid_t = rng.uniform(size=n) < 0.6
        batch = PairBatch(rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.integers(0, 3, n), valid_t)
        k = int(rng.integers(1, 4))
        masked = np.zeros(k, bool)
        dummy = PairBatch(rng.standard_normal((k, d)) * 5, rng.standard_normal((k, d)) * 5, rng.integers(0, 3, k), masked, masked)
        padded = batch.append(dummy) if trial % 2 else dummy.append(batch)
        lam = float(rng.uniform(0, 1))
        for kwargs_a, kwargs_b in (
            ({"eps": (rng.standard_normal((n, latent)), rng.standard_normal((valid_t.sum(), latent)))},) * 2,
            ({"rng": make_rng(trial)}, {"rng": make_rng(trial)}),
        ):
            la, ga = ccvae_loss(model.copy(), batch, lam, **kwargs_a)
            lb, gb = ccvae_loss(model.copy(), padded, lam, **kwargs_b)
            trials += 1
            if la != lb or not all(np.array_equal(x, y) for x, y in zip(ga, gb)):
                mismatches += 1
    verdict(7, "mask exclusion", mismatches == 0, f"{trials - mismatches}/{trials} padded batches bitwise identical")


def test_warmup_contract(verdict):
    src, tgt = gen_synthetic_benchmark(SyntheticConfig(num_classes=3, feature_dim=4, samples_per_class_per_domain=30, seed=4))
    task = make_task(src, tgt, SplitSpec([0, 1], [2], 0.5, 0))
    _, history = train(CcvaeModel(4, 8, 2, make_rng(0)), task, TrainConfig(epochs=6, batch_size=16, seed=1))
    lam = history.lambdas
    ok = lam[0] == 0.0 and all(b >= a for a, b in zip(lam, lam[1:])) and lam[-1] == 0.2
    verdict(8, "warm-up contract", ok, f"{len(lam)} steps, first={lam[0]!r}, last={lam[-1]!r}")


def test_file_round_trips(verdict, tmp_path):
    rng = make_rng(99)
    same_fvec = same_ckpt = 0
    for i in range(20):
        n, d = int(rng.integers(0, 40)), int(rng.integers(1, 16))
        ds = FeatureDataset(rng.standard_normal((n, d)) * 100, rng.integers(0, 65536, n), rng.integers(0, 2, n), d)
        a, b = tmp_path / f"{i}a.fvec", tmp_path / f"{i}b.fvec"
        save_dataset(ds, a)
        save_dataset(load_dataset(a), b)
        same_fvec += a.read_bytes() == b.read_bytes()

        model = perturbed_model(rng, int(rng.integers(1, 10)), int(rng.integers(1, 12)), int(rng.integers(1, 6)))
        a, b = tmp_path / f"{i}a.ckpt", tmp_path / f"{i}b.ckpt"
        save_checkpoint(model, a, {"seed": i, "note": "round trip"})
        loaded, config = load_checkpoint(a)
        save_checkpoint(loaded, b, config)
        same_ckpt += a.read_bytes() == b.read_bytes()
    ok = same_fvec == 20 and same_ckpt == 20
    verdict(9, "file-format round trips", ok, f"FVEC {same_fvec}/20, checkpoint {same_ckpt}/20 byte-identical")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
