"""Command-line entry point: ``gzsda <subcommand> [flags]``.

Every subcommand reads one run config, resolved as built-in defaults, then the
JSON file given by ``--config``, then command-line flags. The effective config
and master seed are written next to (or inside) every artifact.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .ccvae import (
    SOURCE,
    TARGET,
    CcvaeModel,
    PairBatch,
    ccvae_loss,
    kl_divergence,
    load_checkpoint,
    save_checkpoint,
)
from .classify import LinearClassifier
from .data import (
    DatasetFormatError,
    FeatureDataset,
    SyntheticConfig,
    gen_synthetic_benchmark,
    load_dataset,
    make_task,
    random_splits,
    read_manifest,
    save_dataset,
    write_manifest,
)
from .estimators import CoupledCVAE, generation_budget, synthesize
from .evaluate import METHODS, PipelineConfig, aggregate, harmonic_summary, per_class_accuracy, run_method, write_reports
from .nn import NonDeterminismError, grad_check, make_rng
from .seeding import derive_seed

logger = logging.getLogger("gzsda")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field or path."""


def default_config() -> dict:
    synthetic = SyntheticConfig().to_dict()
    synthetic["seed"] = None  # None follows the master seed
    pipeline = PipelineConfig().to_dict()
    del pipeline["seed"]
    return {
        "seed": 0,
        "out": "runs/default",
        "format": "fvec",
        "threads": 1,
        "data": {"source": None, "target": None, "manifest": None},
        "synthetic": synthetic,
        "split": {"num_unseen": 5, "num_splits": 5, "target_train_fraction": 0.5, "split_id": 0},
        "pipeline": pipeline,
        "methods": list(METHODS),
    }


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config field {name!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {name!r} must be an object")
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def _parse_assignment(text: str) -> dict:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: dict = {}
    root = node
    parts = key.split(".")
    for part in parts[:-1]:
        node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return root


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then command-line flags."""
    config = default_config()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            config = _merge(config, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for item in args.set or ():
        config = _merge(config, _parse_assignment(item))
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        config["out"] = args.out
    if args.format is not None:
        config["format"] = args.format
    if args.threads is not None:
        config["threads"] = args.threads
    if args.deterministic_mu:
        config["pipeline"]["deterministic_mu"] = True
    _validate(config)
    return config


def _validate(config: dict) -> None:
    seed = config["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
    if config["format"] not in ("csv", "fvec"):
        raise ConfigError(f"format must be 'csv' or 'fvec', got {config['format']!r}")
    if not isinstance(config["threads"], int) or config["threads"] < 1:
        raise ConfigError(f"threads must be a positive integer, got {config['threads']!r}")
    unknown = [m for m in config["methods"] if m not in METHODS]
    if unknown or not config["methods"]:
        raise ConfigError(f"methods must be a non-empty subset of {list(METHODS)}, got {config['methods']!r}")
    for section, factory in (("synthetic", synthetic_config), ("pipeline", pipeline_config)):
        try:
            built = factory(config)
            if section == "pipeline":
                _check_pipeline(built)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc
    split = config["split"]
    for key in ("num_unseen", "num_splits", "split_id"):
        if not isinstance(split[key], int) or split[key] < 0:
            raise ConfigError(f"split.{key} must be a non-negative integer, got {split[key]!r}")
    if split["split_id"] >= split["num_splits"]:
        raise ConfigError(f"split.split_id {split['split_id']} is out of range for {split['num_splits']} splits")


def synthetic_config(config: dict) -> SyntheticConfig:
    params = dict(config["synthetic"])
    if params["seed"] is None:
        params["seed"] = config["seed"]
    return SyntheticConfig(**params)


def pipeline_config(config: dict) -> PipelineConfig:
    return PipelineConfig(**config["pipeline"], seed=config["seed"])


def _check_pipeline(cfg: PipelineConfig) -> None:
    for key in ("hidden", "latent_dim", "batch_size", "epochs", "classifier_epochs"):
        if getattr(cfg, key) < (0 if "epochs" in key else 1):
            raise ValueError(f"{key} must be >= {0 if 'epochs' in key else 1}, got {getattr(cfg, key)}")


def _echo(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


# data loading -------------------------------------------------------------


def load_domains(config: dict) -> tuple[FeatureDataset, FeatureDataset, int]:
    """(source, target, num_classes) from dataset files or the synthetic generator."""
    data = config["data"]
    source, target = data["source"], data["target"]
    class_names = None
    if data["manifest"]:
        path = Path(data["manifest"])
        if not path.is_file():
            raise ConfigError(f"data.manifest: file not found: {path}")
        manifest = read_manifest(path)
        source = source or manifest["files"].get("source")
        target = target or manifest["files"].get("target")
        class_names = manifest.get("class_names")
    if source is None and target is None:
        src, tgt = gen_synthetic_benchmark(synthetic_config(config))
        return src, tgt, config["synthetic"]["num_classes"]
    for name, path in (("data.source", source), ("data.target", target)):
        if path is None:
            raise ConfigError(f"{name} is required when the other dataset path is given")
        if not Path(path).is_file():
            raise ConfigError(f"{name}: dataset file not found: {path}")
    num_classes = len(class_names) if class_names else None
    src, tgt = load_dataset(source, num_classes=num_classes), load_dataset(target, num_classes=num_classes)
    if num_classes is None:
        num_classes = int(max(src.labels.max(initial=-1), tgt.labels.max(initial=-1))) + 1
    return src, tgt, num_classes


def build_task(source, target, num_classes: int, config: dict, split_id: int | None = None):
    split = config["split"]
    split_id = split["split_id"] if split_id is None else split_id
    specs = random_splits(num_classes, split["num_unseen"], split["num_splits"], config["seed"], split["target_train_fraction"])
    return make_task(source, target, specs[split_id])


def _load_task(config: dict):
    source, target, num_classes = load_domains(config)
    return build_task(source, target, num_classes, config), num_classes


def _write_dataset(ds: FeatureDataset, path: Path, config: dict, provenance: dict) -> None:
    """Dataset file plus a JSON sidecar carrying the config echo."""
    save_dataset(ds, path, config["format"])
    sidecar = {"seed": config["seed"], "config": config, **provenance}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(config: dict) -> Path:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# checkpoints --------------------------------------------------------------


def _cvae_header(cvae: CoupledCVAE, config: dict) -> dict:
    return {
        "seed": config["seed"],
        "run": config,
        "feature_mean": cvae.mean_.tolist(),
        "feature_scale": cvae.scale_.tolist(),
    }


def cvae_from_checkpoint(path) -> tuple[CoupledCVAE, dict]:
    """A fitted ``CoupledCVAE`` rebuilt from a checkpoint written by ``train``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model, header = load_checkpoint(path)
    run = header.get("run", {})
    p = run.get("pipeline", {})
    cvae = CoupledCVAE(hidden=model.hidden[0], latent_dim=model.latent_dim, random_state=header.get("seed", 0))
    for key in ("epochs", "batch_size", "learning_rate", "lambda_max", "warmup_fraction", "scale_features"):
        if key in p:
            setattr(cvae, key, p[key])
    cvae.model_ = model
    cvae.mean_ = np.asarray(header.get("feature_mean", np.zeros(model.feature_dim)), dtype=np.float64)
    cvae.scale_ = np.asarray(header.get("feature_scale", np.ones(model.feature_dim)), dtype=np.float64)
    cvae.n_features_in_ = model.feature_dim
    return cvae, run


# subcommands --------------------------------------------------------------


def cmd_synth_data(config: dict, args) -> int:
    out = _out_dir(config)
    src, tgt = gen_synthetic_benchmark(synthetic_config(config))
    ext = config["format"]
    files = {"source": f"source.{ext}", "target": f"target.{ext}"}
    save_dataset(src, out / files["source"], ext)
    save_dataset(tgt, out / files["target"], ext)
    names = [f"class_{c}" for c in range(config["synthetic"]["num_classes"])]
    write_manifest(out / "manifest.json", files, names, {"seed": config["seed"], "config": config})
    print(f"wrote {len(src)} source and {len(tgt)} target rows to {out}")
    return 0


def cmd_train(config: dict, args) -> int:
    if args.resume:
        raise ConfigError("resuming from a checkpoint is not supported; start a fresh run")
    task, _ = _load_task(config)
    p = pipeline_config(config)
    cvae = CoupledCVAE(
        p.hidden, p.latent_dim, p.epochs, p.batch_size, p.learning_rate, p.lambda_max, p.warmup_fraction,
        p.scale_features, derive_seed(config["seed"], "ccvae", config["split"]["split_id"]),
    )
    start = time.perf_counter()
    cvae.fit_task(task)
    out = _out_dir(config)
    save_checkpoint(cvae.model_, out / "ccvae.ckpt", _cvae_header(cvae, config))
    with open(out / "loss_history.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={config['seed']} config={_echo(config)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        keys = [f.name for f in fields(cvae.history_.epochs[0])] if cvae.history_.epochs else []
        writer.writerow(["epoch", *keys])
        for i, b in enumerate(cvae.history_.epochs):
            writer.writerow([i, *(repr(float(getattr(b, k))) for k in keys)])
    print(f"trained {p.epochs} epochs in {time.perf_counter() - start:.1f}s; checkpoint {out / 'ccvae.ckpt'}")
    return 0


def _domain(name: str) -> int:
    return {"source": SOURCE, "target": TARGET}[name]


def cmd_generate(config: dict, args) -> int:
    cvae, _ = cvae_from_checkpoint(args.checkpoint)
    if args.input:
        if not Path(args.input).is_file():
            raise ConfigError(f"--input: dataset file not found: {args.input}")
        pool = load_dataset(args.input)
    else:
        task, _ = _load_task(config)
        pool = task.source_train if args.from_domain == "source" else task.target_train
    if pool.feature_dim != cvae.n_features_in_:
        raise ConfigError(f"input dim {pool.feature_dim} does not match checkpoint dim {cvae.n_features_in_}")
    classes = args.classes if args.classes is not None else pool.classes().tolist()
    if args.budget < 0:
        raise ConfigError(f"--budget must be >= 0, got {args.budget}")
    rng = make_rng(derive_seed(config["seed"], "generate"))
    deterministic = config["pipeline"]["deterministic_mu"]
    feats, labels = [np.zeros((0, pool.feature_dim))], [np.zeros(0, dtype=np.int64)]
    for c in classes:
        rows = np.flatnonzero(pool.labels == c)
        if len(rows) == 0:
            raise ConfigError(f"class {c} has no rows in the input dataset")
        if args.budget == 0:
            continue
        picks = rows[rng.integers(0, len(rows), size=args.budget)]
        feats.append(cvae._generate(pool.features[picks], _domain(args.from_domain), _domain(args.to_domain), rng, deterministic))
        labels.append(np.full(args.budget, c, dtype=np.int64))
    ds = FeatureDataset(np.vstack(feats), np.concatenate(labels), _domain(args.to_domain), pool.feature_dim)
    out = _out_dir(config) / f"generated.{config['format']}"
    _write_dataset(ds, out, config, {"checkpoint": str(args.checkpoint), "budget": args.budget, "classes": list(classes)})
    print(f"wrote {len(ds)} generated rows to {out}")
    return 0


def cmd_classify(config: dict, args) -> int:
    cvae, _ = cvae_from_checkpoint(args.checkpoint)
    task, num_classes = _load_task(config)
    p = pipeline_config(config)
    split_id = config["split"]["split_id"]
    budget = generation_budget(task) if p.budget is None else int(p.budget)
    rng = make_rng(derive_seed(config["seed"], "synthesize", split_id))
    gx, gy, tags = synthesize(cvae, task, budget, rng, p.source_augmentation, p.deterministic_mu)
    X = np.vstack([task.source_train.features, task.target_train.features, gx])
    y = np.concatenate([task.source_train.labels, task.target_train.labels, gy])
    clf = LinearClassifier(
        num_classes, p.classifier_epochs, p.classifier_learning_rate, p.standardize,
        random_state=derive_seed(config["seed"], "classifier", split_id),
    ).fit(X, y)
    out = _out_dir(config) / "classifier.linc"
    counts = {"real_source": len(task.source_train), "real_target": len(task.target_train)}
    counts.update({t: tags.count(t) for t in ("synth_target", "synth_source")})
    clf.save(out, {"seed": config["seed"], "run": config, "train_counts": counts})
    print(f"trained classifier on {len(X)} rows {counts}; saved {out}")
    return 0


def cmd_evaluate(config: dict, args) -> int:
    task, _ = _load_task(config)
    split_id = config["split"]["split_id"]
    out = _out_dir(config)
    if args.classifier:
        path = Path(args.classifier)
        if not path.is_file():
            raise ConfigError(f"classifier file not found: {path}")
        clf = LinearClassifier.load(path)
        acc = per_class_accuracy(clf.predict(task.target_test.features), task.target_test.labels)
        acc_seen, acc_unseen, h = harmonic_summary(acc, task.split)
        report = {
            "method": "classifier", "split_id": split_id, "classifier": str(path),
            "per_class_acc": {str(k): v for k, v in sorted(acc.items())},
            "acc_seen": acc_seen, "acc_unseen": acc_unseen, "h": h,
            "config": {"seed": config["seed"], "run": config},
        }
        name = "classifier"
    else:
        r = run_method(args.method, task, pipeline_config(config), split_id, {"seed": config["seed"], "run": config})
        report, name = r.to_dict(), args.method
        acc_seen, acc_unseen, h = r.acc_seen, r.acc_unseen, r.h
    path = out / f"evaluate_{name}_{split_id}.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"acc_seen={acc_seen:.4f} acc_unseen={acc_unseen:.4f} H={h:.4f} -> {path}")
    return 0


def _benchmark_split(job):
    source, target, num_classes, config, split_id = job
    task = build_task(source, target, num_classes, config, split_id)
    p = pipeline_config(config)
    extra = {"seed": config["seed"], "run": config}
    return [run_method(m, task, p, split_id, extra) for m in config["methods"]]


def run_benchmark(config: dict):
    """All configured methods over all splits; returns (reports, summary)."""
    source, target, num_classes = load_domains(config)
    jobs = [(source, target, num_classes, config, i) for i in range(config["split"]["num_splits"])]
    if config["threads"] > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config["threads"]) as pool:
            results = list(pool.map(_benchmark_split, jobs))
    else:
        results = [_benchmark_split(job) for job in jobs]
    reports = [r for split in results for r in split]
    return reports, aggregate(reports)


def cmd_benchmark(config: dict, args) -> int:
    start = time.perf_counter()
    reports, summary = run_benchmark(config)
    out = _out_dir(config)
    write_reports(out, reports, summary, config)
    print(summary.to_text(), end="")
    print(f"{len(reports)} runs in {time.perf_counter() - start:.1f}s; reports in {out}")
    return 0


# self-check -----------------------------------------------------------------


def _tiny_batch(seed: int, feature_dim: int = 8):
    rng = make_rng(seed)
    model = CcvaeModel(feature_dim, 6, 3, rng)
    for p in model.parameters():
        p.value += 0.1 * rng.standard_normal(p.shape)
    batch = PairBatch(
        rng.standard_normal((4, feature_dim)), rng.standard_normal((4, feature_dim)),
        np.array([0, 1, 0, 2]), np.array([True, True, False, True]),
    )
    eps = (rng.standard_normal((4, 3)), rng.standard_normal((3, 3)))
    return model, batch, eps


def selfcheck_gradients(seed: int = 0, perturb: float = 0.0):
    """Finite-difference check of the full coupled loss on a tiny model."""
    model, batch, eps = _tiny_batch(seed)
    params = model.parameters()

    def loss():
        breakdown, grads = ccvae_loss(model, batch, 0.2, eps=eps)
        if perturb:
            params[0].grad.flat[0] += perturb
        return breakdown.total

    model.zero_grad()
    return grad_check(loss, params, h=1e-5, tolerance=1e-4)


def run_selfcheck(seed: int = 0, perturb: float = 0.0) -> list[tuple[str, bool, str]]:
    results = []
    try:
        report = selfcheck_gradients(seed, perturb)
        results.append(("gradient check", report.passed, f"max relative error {report.max_rel_error:.3e} at {report.worst_parameter}"))
    except NonDeterminismError as exc:
        results.append(("gradient check", False, str(exc)))

    zero = kl_divergence(np.zeros((3, 4)), np.zeros((3, 4)))
    results.append(("KL at the prior", zero == 0.0, f"KL(0, 0) = {zero!r}"))
    rng = make_rng(derive_seed(seed, "selfcheck-kl"))
    mu, logvar = rng.normal(size=(1, 3)), rng.normal(scale=0.5, size=(1, 3))
    z = mu + np.exp(0.5 * logvar) * rng.standard_normal((200_000, 3))
    log_q = -0.5 * (np.log(2 * np.pi) + logvar + (z - mu) ** 2 / np.exp(logvar)).sum(axis=1)
    log_p = -0.5 * (np.log(2 * np.pi) + z**2).sum(axis=1)
    mc, closed = float(np.mean(log_q - log_p)), kl_divergence(mu, logvar)
    rel = abs(mc - closed) / closed
    results.append(("KL Monte-Carlo", rel < 0.02, f"closed form {closed:.5f}, estimate {mc:.5f}, relative error {rel:.2e}"))

    model, batch, _ = _tiny_batch(seed)
    a, _ = ccvae_loss(model.copy(), batch, 0.2, make_rng(7))
    b, _ = ccvae_loss(model.copy(), batch, 0.2, make_rng(7))
    results.append(("loss determinism", a == b, f"total {a.total:.12g} vs {b.total:.12g}"))

    padded = batch.append(PairBatch(np.ones((1, 8)), np.ones((1, 8)), [0], [False], [False]))
    m1, m2 = model.copy(), model.copy()
    eps = (make_rng(1).standard_normal((4, 3)), make_rng(2).standard_normal((3, 3)))
    la, ga = ccvae_loss(m1, batch, 0.2, eps=eps)
    lb, gb = ccvae_loss(m2, padded, 0.2, eps=eps)
    same = la == lb and all(np.array_equal(x, y) for x, y in zip(ga, gb))
    results.append(("masked rows ignored", same, "loss and gradients bitwise equal" if same else "padding changed the loss"))
    return results


def cmd_selfcheck(config: dict, args) -> int:
    results = run_selfcheck(config["seed"], args.perturb_gradient)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


# argument parsing -----------------------------------------------------------

COMMANDS = {
    "synth-data": (cmd_synth_data, "write a synthetic two-domain benchmark"),
    "train": (cmd_train, "train the coupled VAE on one split"),
    "generate": (cmd_generate, "generate features with a trained checkpoint"),
    "classify": (cmd_classify, "train the unified classifier from a checkpoint"),
    "evaluate": (cmd_evaluate, "score a classifier or one method on one split"),
    "benchmark": (cmd_benchmark, "all methods over all splits with summary tables"),
    "selfcheck": (cmd_selfcheck, "gradient, KL and determinism diagnostics"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", choices=("csv", "fvec"), help="dataset output format")
    common.add_argument("--deterministic-mu", action="store_true", help="decode posterior means when generating")
    common.add_argument("--threads", type=int, help="worker processes for benchmark splits")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. split.num_unseen=3")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gzsda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {name: sub.add_parser(name, parents=[common], help=text) for name, (_, text) in COMMANDS.items()}
    parsers["train"].add_argument("--resume", metavar="CHECKPOINT", help="not supported")
    gen = parsers["generate"]
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--input", help="dataset to draw inputs from (default: the configured split)")
    gen.add_argument("--from-domain", choices=("source", "target"), default="source")
    gen.add_argument("--to-domain", choices=("source", "target"), default="target")
    gen.add_argument("--budget", type=int, default=10, help="rows per class")
    gen.add_argument("--classes", type=int, nargs="*", help="classes to generate (default: all in the input)")
    parsers["classify"].add_argument("--checkpoint", required=True)
    ev = parsers["evaluate"]
    ev.add_argument("--classifier", help="classifier file written by classify")
    ev.add_argument("--method", choices=METHODS, default="ccvae", help="method to run when no classifier is given")
    parsers["selfcheck"].add_argument("--perturb-gradient", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        return COMMANDS[args.command][0](config, args)
    except (ConfigError, DatasetFormatError) as exc:
        print(f"gzsda {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"gzsda {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
