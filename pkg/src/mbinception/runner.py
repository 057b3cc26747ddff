"""Training, evaluation and comparison runs behind the CLI."""

import json
import logging
import os
import time

import numpy as np

from . import zoo
from .checkpoint import atomic_write, dumps_json, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import CLASS_COUNTS, BatchIterator, load_dataset, split_validation
from .errors import ConfigError, EngineError, NumericalError
from .graph import backward, count_parameters, forward, predict_proba
from .metrics import (
    MetricReport,
    confusion_matrix,
    metric_row,
    probability_density_report,
    read_metric_csv,
    write_histogram_csv,
    write_metric_csv,
)
from .optim import apply_updates, make_optimizer, scheduled_rate, set_rate

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def _dtype(cfg):
    return np.float32 if cfg["train.dtype"] == "float32" else np.float64


def load_splits(cfg):
    """Return ``(train, validation, test)`` datasets for a config."""
    name, root = cfg["data.name"], cfg["data.root"]
    dtype = _dtype(cfg)
    full = load_dataset(name, root, "train", cfg["data.resize"], cfg["data.train_limit"] or None)
    full.images = full.images.astype(dtype, copy=False)
    train, val = split_validation(full, cfg["data.val_fraction"], cfg["seed"])
    test = load_dataset(name, root, "test", cfg["data.resize"], cfg["data.test_limit"] or None)
    test.images = test.images.astype(dtype, copy=False)
    return train, val, test


def build_model(cfg, num_classes):
    shape = (1, 32, 32, 3)
    return zoo.build(cfg["model.name"], input_shape=shape, num_classes=num_classes, seed=cfg["seed"],
                     dtype=_dtype(cfg), **cfg.model_kwargs())


def evaluate(model, dataset, bins=20):
    """Infer-mode pass. Returns ``(report, probabilities)``."""
    if dataset.num_classes != model.num_classes:
        raise ConfigError(
            f"class-count mismatch: model outputs {model.num_classes} classes, dataset has {dataset.num_classes}"
        )
    probs = predict_proba(model, dataset.images)
    cm = confusion_matrix(dataset.labels, probs.argmax(axis=1), model.num_classes)
    return MetricReport.from_confusion(cm), probs


def write_eval_outputs(out_dir, model_name, dataset_name, report, probs, labels, param_count, epochs, seed,
                       bins=20):
    os.makedirs(out_dir, exist_ok=True)
    write_metric_csv(os.path.join(out_dir, "metrics.csv"),
                     [metric_row(model_name, dataset_name, report, param_count, epochs, seed)])
    edges, dens = probability_density_report(probs.max(axis=1), bins)
    write_histogram_csv(os.path.join(out_dir, "hist_max_prob.csv"), edges, dens)
    edges, dens = probability_density_report(probs[np.arange(labels.size), labels], bins)
    write_histogram_csv(os.path.join(out_dir, "hist_true_prob.csv"), edges, dens)


def train(cfg, splits=None):
    """Train per ``cfg``; writes checkpoints, manifest and CSVs into the run directory.

    Returns ``(manifest, run_dir)``.
    """
    started = time.perf_counter()
    seed = cfg["seed"]
    train_set, val_set, test_set = splits if splits is not None else load_splits(cfg)
    model = build_model(cfg, train_set.num_classes)
    optimizer = make_optimizer(cfg["optim.name"], **cfg.optimizer_kwargs())
    batches = BatchIterator(train_set, cfg["train.batch_size"], seed)
    base_rate = cfg.optimizer_kwargs().get("eta", cfg["optim.lr"])
    total_steps = max(1, len(batches) * cfg["train.epochs"])
    run_dir = cfg.run_dir()
    os.makedirs(run_dir, exist_ok=True)
    ckpt_meta = {"config": cfg.as_json()}

    loss_trace, val_trace = [], []
    best_acc, best_epoch = -1.0, 0
    for epoch in range(cfg["train.epochs"]):
        dropout_rng = np.random.default_rng([seed, 2, epoch])
        losses = []
        for b, (xb, yb) in enumerate(batches.epoch(epoch)):
            set_rate(optimizer, scheduled_rate(base_rate, epoch * len(batches) + b, total_steps,
                                               cfg["train.schedule"]))
            tape = forward(model, xb, "train", dropout_rng)
            loss, grads = backward(model, tape, yb)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch + 1}, batch {b + 1}")
            apply_updates(model.store, grads, optimizer)
            losses.append(loss)
        loss_trace.append(float(np.mean(losses)))
        val_report, _ = evaluate(model, val_set)
        val_trace.append(val_report.accuracy)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch + 1, loss_trace[-1], val_report.accuracy)
        if val_report.accuracy > best_acc:
            best_acc, best_epoch = val_report.accuracy, epoch + 1
            save_checkpoint(os.path.join(run_dir, "checkpoint.best.ckpt"), model, optimizer,
                            {**ckpt_meta, "epoch": epoch + 1})
    save_checkpoint(os.path.join(run_dir, "checkpoint.final.ckpt"), model, optimizer,
                    {**ckpt_meta, "epoch": cfg["train.epochs"]})
    if best_epoch == 0:
        save_checkpoint(os.path.join(run_dir, "checkpoint.best.ckpt"), model, optimizer, {**ckpt_meta, "epoch": 0})

    train_report, _ = evaluate(model, train_set)
    report, probs = evaluate(model, test_set)
    params = count_parameters(model)
    write_eval_outputs(run_dir, cfg["model.name"], cfg["data.name"], report, probs, test_set.labels, params,
                       cfg["train.epochs"], seed, cfg["eval.bins"])
    manifest = {
        "format_version": MANIFEST_VERSION,
        "config": cfg.as_json(),
        "param_count": params,
        "train_loss": loss_trace,
        "val_accuracy": val_trace,
        "best_epoch": best_epoch,
        "train_accuracy": train_report.accuracy,
        "samples": {"train": len(train_set), "validation": len(val_set), "test": len(test_set)},
        "test_metrics": report.as_dict(),
    }
    atomic_write(os.path.join(run_dir, "manifest.json"), dumps_json(manifest) + "\n")
    # wall-clock time varies run to run, so it lives outside the manifest
    atomic_write(os.path.join(run_dir, "timing.json"),
                 json.dumps({"wall_clock_seconds": time.perf_counter() - started}) + "\n")
    return manifest, run_dir


def eval_checkpoint(checkpoint, dataset_name, root, out_dir, split="test", limit=None, resize="pad", bins=20):
    """Evaluate a checkpoint on a dataset split; writes metrics and histogram CSVs into ``out_dir``."""
    model, _, meta = load_checkpoint(checkpoint)
    if CLASS_COUNTS.get(dataset_name) != model.num_classes:
        raise ConfigError(
            f"class-count mismatch: model outputs {model.num_classes} classes, "
            f"{dataset_name} has {CLASS_COUNTS.get(dataset_name)}"
        )
    ds = load_dataset(dataset_name, root, split, resize, limit)
    dtype = next(iter(model.store.params.values())).dtype
    ds.images = ds.images.astype(dtype, copy=False)
    report, probs = evaluate(model, ds, bins)
    cfg = meta.get("config", {})
    write_eval_outputs(out_dir, model.name, dataset_name, report, probs, ds.labels, count_parameters(model),
                       meta.get("epoch", 0), cfg.get("seed", 0), bins)
    return report


def compare(configs):
    """Train and evaluate each config; write ``comparison.csv`` next to the first run directory."""
    if len(configs) < 2:
        raise ConfigError("compare needs at least two configs")
    rows = []
    for i, cfg in enumerate(configs):
        try:
            manifest, run_dir = train(cfg)
        except EngineError as exc:
            raise type(exc)(f"config #{i + 1} ({cfg['model.name']}, seed {cfg['seed']}) failed: {exc}") from None
        rows.extend(read_metric_csv(os.path.join(run_dir, "metrics.csv")))
    out = os.path.join(configs[0]["output.dir"], "comparison.csv")
    write_metric_csv(out, rows)
    return rows, out


def default_compare_configs(base):
    """The four-model desk-scale comparison derived from one base config."""
    out = []
    for name in ("mobilenet-style", "mbinception", "vgg-style", "resnet-style"):
        cfg = RunConfig(base)
        cfg["model.name"] = name
        cfg.validate()
        out.append(cfg)
    return out
