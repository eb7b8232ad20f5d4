"""GZSDA metrics, the method runner, and split aggregation/report files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classify import LinearClassifier, knn_predict
from .data import FeatureDataset, GzsdaTask, SplitSpec
from .estimators import GzsdaClassifier
from .seeding import derive_seed

logger = logging.getLogger(__name__)

METHODS = ("source_only", "baseline_1nn", "baseline_nn", "ccvae")
METHOD_LABELS = {
    "source_only": "Source Only",
    "baseline_1nn": "Baseline (1NN)",
    "baseline_nn": "Baseline (NN)",
    "ccvae": "CCVAE",
}


def per_class_accuracy(predictions, labels) -> dict[int, float]:
    """Accuracy for every class that has at least one test sample."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    return {int(c): float(np.mean(predictions[labels == c] == c)) for c in np.unique(labels)}


def harmonic_mean(a: float, b: float) -> float:
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


def harmonic_summary(per_class_acc: dict, split: SplitSpec) -> tuple[float, float, float]:
    """(acc_seen, acc_unseen, H) from unweighted means over the classes present."""
    seen = [per_class_acc[c] for c in split.seen_classes if c in per_class_acc]
    unseen = [per_class_acc[c] for c in split.unseen_classes if c in per_class_acc]
    acc_seen = float(np.mean(seen)) if seen else 0.0
    acc_unseen = float(np.mean(unseen)) if unseen else 0.0
    return acc_seen, acc_unseen, harmonic_mean(acc_seen, acc_unseen)


@dataclass
class PipelineConfig:
    """Settings shared by every method in a benchmark run."""

    hidden: int = 128
    latent_dim: int = 8
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-3
    lambda_max: float = 0.2
    warmup_fraction: float = 0.2
    scale_features: bool = True
    classifier_epochs: int = 200
    classifier_learning_rate: float = 1e-3
    standardize: bool = False
    budget: int | None = None
    source_augmentation: bool = True
    deterministic_mu: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    method: str
    split_id: int
    per_class_acc: dict
    acc_seen: float
    acc_unseen: float
    h: float
    config: dict
    train_counts: dict = field(default_factory=dict)
    missing_classes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["per_class_acc"] = {str(k): v for k, v in sorted(self.per_class_acc.items())}
        return out


def _stack(*parts: FeatureDataset):
    return np.vstack([p.features for p in parts]), np.concatenate([p.labels for p in parts])


def run_method(method: str, task: GzsdaTask, config: PipelineConfig, split_id: int = 0, extra: dict | None = None) -> EvalReport:
    """Train one method on ``task`` and score it on the target test set."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    num_classes = max(task.split.classes) + 1
    test = task.target_test
    counts = {"real_source": len(task.source_train)}
    if method == "source_only":
        pred = knn_predict(task.source_train.features, task.source_train.labels, test.features)
    elif method == "baseline_1nn":
        X, y = _stack(task.source_train, task.target_train)
        counts["real_target"] = len(task.target_train)
        pred = knn_predict(X, y, test.features)
    elif method == "baseline_nn":
        X, y = _stack(task.source_train, task.target_train)
        counts["real_target"] = len(task.target_train)
        clf = LinearClassifier(
            num_classes, config.classifier_epochs, config.classifier_learning_rate, config.standardize,
            random_state=derive_seed(config.seed, "baseline_nn/classifier", split_id),
        ).fit(X, y)
        pred = clf.predict(test.features)
    else:
        params = {k: v for k, v in config.to_dict().items() if k != "seed"}
        pipe = GzsdaClassifier(**params, random_state=derive_seed(config.seed, "ccvae", split_id))
        pipe.fit_task(task, num_classes)
        counts = pipe.train_counts_
        pred = pipe.predict(test.features)
    acc = per_class_accuracy(pred, test.labels)
    missing = sorted(set(task.split.classes) - set(acc))
    if missing:
        logger.warning("classes %s have no test samples and are excluded", missing)
    acc_seen, acc_unseen, h = harmonic_summary(acc, task.split)
    echo = {"pipeline": config.to_dict(), "split": asdict(task.split), **(extra or {})}
    return EvalReport(method, split_id, acc, acc_seen, acc_unseen, h, echo, counts, missing)


@dataclass
class MetricStats:
    mean: float
    sem: float | None


@dataclass
class AggregateReport:
    """Mean and standard error over splits, per method."""

    methods: dict  # method -> {"acc_seen": MetricStats, "acc_unseen": ..., "h": ..., "num_splits": n}

    def table_rows(self):
        for method, stats in self.methods.items():
            yield method, stats

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "num_splits", "acc_seen_mean", "acc_seen_sem", "acc_unseen_mean", "acc_unseen_sem", "h_mean", "h_sem"])
        for method, stats in self.table_rows():
            row = [method, stats["num_splits"]]
            for key in ("acc_seen", "acc_unseen", "h"):
                m = stats[key]
                row += [f"{m.mean:.6f}", "" if m.sem is None else f"{m.sem:.6f}"]
            writer.writerow(row)
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table in percent, mean +- SEM."""

        def cell(m: MetricStats) -> str:
            return f"{100 * m.mean:5.1f}" + ("" if m.sem is None else f" +- {100 * m.sem:4.1f}")

        rows = [("Method", "Acc_seen", "Acc_unseen", "H")]
        for method, stats in self.table_rows():
            rows.append((METHOD_LABELS.get(method, method), cell(stats["acc_seen"]), cell(stats["acc_unseen"]), cell(stats["h"])))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))) for r in rows]
        lines.insert(1, "-" * len(lines[0]))
        return "\n".join(lines) + "\n"


def metric_stats(values) -> MetricStats:
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    sem = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) >= 2 else None
    return MetricStats(mean, sem)


def aggregate(reports) -> AggregateReport:
    """Group reports by method; H is the mean of per-split H values."""
    grouped: dict[str, list[EvalReport]] = {}
    for r in reports:
        grouped.setdefault(r.method, []).append(r)
    if not grouped:
        raise ValueError("no reports to aggregate")
    methods = {}
    order = [m for m in METHODS if m in grouped] + sorted(m for m in grouped if m not in METHODS)
    for method in order:
        group = grouped[method]
        pipelines = {json.dumps(r.config.get("pipeline"), sort_keys=True) for r in group}
        if len(pipelines) > 1:
            raise ValueError(f"reports for {method} were produced with different configurations")
        methods[method] = {
            "acc_seen": metric_stats([r.acc_seen for r in group]),
            "acc_unseen": metric_stats([r.acc_unseen for r in group]),
            "h": metric_stats([r.h for r in group]),
            "num_splits": len(group),
        }
    return AggregateReport(methods)


def write_reports(run_dir, reports, summary: AggregateReport, config_echo: dict) -> None:
    """``<run>/<method>/<split>.json``, ``summary.csv``, ``summary.txt`` and the config echo."""
    run_dir = Path(run_dir)
    for r in reports:
        path = run_dir / r.method / f"{r.split_id}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(r.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    header = f"# seed={config_echo.get('seed')} config={json.dumps(config_echo, sort_keys=True, separators=(',', ':'))}\n"
    (run_dir / "summary.csv").write_text(header + summary.to_csv(), encoding="utf-8")
    (run_dir / "summary.txt").write_text(header + summary.to_text(), encoding="utf-8")
    (run_dir / "config.json").write_text(json.dumps(config_echo, indent=2, sort_keys=True) + "\n", encoding="utf-8")
