"""Accuracy, confusion matrices, hard-example ratio, gradient similarity,
pseudo-label drift, and the metric log."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .diffcore import ContractError, ShapeError


# ------------------------------------------------------------------ accuracy


def _pair(pred, ref):
    pred, ref = np.asarray(pred), np.asarray(ref)
    if pred.shape != ref.shape:
        raise ShapeError(f"lengths differ: {pred.shape} vs {ref.shape}")
    if pred.size == 0:
        raise ContractError("empty input")
    return pred, ref


def accuracy(pred, labels) -> float:
    pred, labels = _pair(pred, labels)
    return float(np.mean(pred == labels))


def per_class_accuracy(pred, labels, num_classes: int | None = None) -> np.ndarray:
    """Accuracy conditioned on the true label; NaN for absent classes."""
    pred, labels = _pair(pred, labels)
    C = num_classes or int(max(pred.max(), labels.max())) + 1
    hits = np.bincount(labels, weights=(pred == labels).astype(float), minlength=C)
    counts = np.bincount(labels, minlength=C).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, hits / np.maximum(counts, 1), np.nan)


def mean_per_class_accuracy(pred, labels, num_classes: int | None = None) -> float:
    return float(np.nanmean(per_class_accuracy(pred, labels, num_classes)))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    axis: str  # "vs_label" or "vs_bias"

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def trace_fraction(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def to_csv(self) -> str:
        C = len(self.counts)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.axis] + [f"pred_{j}" for j in range(C)])
        for i, row in enumerate(self.counts):
            w.writerow([f"ref_{i}"] + [int(v) for v in row])
        return buf.getvalue()


def confusion(pred, reference, num_classes: int, axis: str = "vs_label") -> ConfusionMatrix:
    """Entry (i, j) counts samples with reference i predicted as j."""
    if axis not in ("vs_label", "vs_bias"):
        raise ContractError(f"unknown axis tag {axis!r}")
    pred, reference = _pair(pred, reference)
    if reference.min() < 0 or reference.max() >= num_classes or pred.min() < 0 or pred.max() >= num_classes:
        raise ContractError(f"class index outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (reference, pred), 1)
    return ConfusionMatrix(counts, axis)


# ------------------------------------------------------------------ hard ratio


def hard_ratio(per_sample_losses, hard_mask) -> float:
    """Share of the total loss carried by the masked (hard) samples."""
    losses = np.asarray(per_sample_losses, dtype=np.float64)
    mask = np.asarray(hard_mask, dtype=bool)
    if losses.shape != mask.shape:
        raise ShapeError("losses and mask differ in length")
    if (losses < 0).any():
        raise ContractError("losses must be non-negative")
    total = losses.sum()
    if total == 0:
        return 0.0
    return float(losses[mask].sum() / total)


class HardRatioAccumulator:
    """Accumulates per-sample losses; with ``window > 0`` emits a ratio
    every ``window`` additions and resets."""

    def __init__(self, window: int):
        self.window = window
        self.hard = 0.0
        self.total = 0.0
        self.count = 0

    def add(self, losses, mask) -> float | None:
        losses = np.asarray(losses)
        self.hard += float(losses[np.asarray(mask, dtype=bool)].sum())
        self.total += float(losses.sum())
        self.count += 1
        if self.window and self.count == self.window:
            r = self.ratio()
            self.hard = self.total = 0.0
            self.count = 0
            return r
        return None

    def ratio(self) -> float:
        return self.hard / self.total if self.total > 0 else 0.0


# ------------------------------------------------------------------ gradient cosine


def grad_cosine(g1, g2) -> float:
    a = np.asarray(g1, dtype=np.float64).ravel()
    b = np.asarray(g2, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError("gradient vectors differ in length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def classifier_feature_gradient(model, batch, target_weights) -> np.ndarray:
    """Gradient of soft CE w.r.t. the features entering the final linear layer."""
    from .diffcore import Tape, Tensor, apply_layer, backward, cross_entropy_soft, run_layers

    x = Tensor(model.select(batch))
    feats = run_layers(model.layers[:-1], x, None)
    feats = Tensor(feats.data)
    tape = Tape()
    logits = apply_layer(model.layers[-1], feats, tape)
    loss = cross_entropy_soft(logits, target_weights, tape)
    backward(tape, loss)
    return feats.grad.ravel().copy()


# ------------------------------------------------------------------ pseudo-label drift


@dataclass
class DriftReport:
    mass: np.ndarray  # mean pseudo-label mass per class over the whole dataset
    retention: np.ndarray  # mean pseudo-label mass over samples of each class
    prior: np.ndarray
    mass_rank_corr: float
    retention_rank_corr: float


def _spearman(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(spearmanr(a, b).statistic)


def pseudo_label_drift(H, Y, class_prior=None) -> DriftReport:
    """Where the clipped pseudo-labels put their mass, class by class.

    ``retention_rank_corr`` below zero means frequent classes keep less
    supervision than rare ones (the inverted distribution).
    """
    from .engine import pseudo_labels

    H, Y = np.asarray(H, dtype=np.float64), np.asarray(Y, dtype=np.float64)
    if H.shape != Y.shape:
        raise ShapeError("H and Y differ in shape")
    pl = pseudo_labels(H, Y)
    counts = Y.sum(axis=0)
    prior = counts / counts.sum() if class_prior is None else np.asarray(class_prior, dtype=np.float64)
    mass = pl.mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        retention = np.where(counts > 0, pl.sum(axis=0) / np.maximum(counts, 1), 0.0)
    return DriftReport(mass, retention, prior, _spearman(mass, prior), _spearman(retention, prior))


# ------------------------------------------------------------------ metric log


@dataclass
class MetricLog:
    seed: int
    run: str = "run"
    records: list[dict] = field(default_factory=list)

    def add(self, epoch: int, split: str, metric: str, value, **extra) -> None:
        if self.records and epoch < self.records[-1]["epoch"]:
            raise ContractError("epochs must be non-decreasing within a run")
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, (np.floating, np.integer)):
            value = value.item()
        rec = {"run": self.run, "seed": self.seed, "epoch": epoch, "split": split, "metric": metric, "value": value}
        rec.update(extra)
        self.records.append(rec)

    def get(self, split: str, metric: str, epoch: int | None = None):
        hits = [r for r in self.records if r["split"] == split and r["metric"] == metric]
        if epoch is not None:
            hits = [r for r in hits if r["epoch"] == epoch]
        if not hits:
            raise KeyError(f"{split}/{metric}")
        return hits[-1]["value"]

    def series(self, split: str, metric: str) -> list:
        return [r["value"] for r in self.records if r["split"] == split and r["metric"] == metric]

    def final_epoch(self) -> int:
        return max(r["epoch"] for r in self.records)

    def summary(self) -> dict:
        last = self.final_epoch()
        final = {}
        for r in self.records:
            if r["epoch"] == last and "step" not in r:
                final[f"{r['split']}/{r['metric']}"] = r["value"]
        return {"run": self.run, "seed": self.seed, "epochs": last + 1, "final": final}

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path, summary_path=None) -> None:
        path = Path(path)
        path.write_text(self.to_jsonl())
        if summary_path is not None:
            Path(summary_path).write_text(json.dumps(self.summary(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "MetricLog":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not records:
            raise ContractError(f"{path}: empty metric log")
        log = cls(seed=records[0]["seed"], run=records[0].get("run", "run"))
        log.records = records
        return log


# ------------------------------------------------------------------ evaluation


def record_eval(metrics: MetricLog, epoch: int, split: str, model, dataset) -> dict:
    batch = dataset.batch()
    pred = predict_in_chunks(model, dataset)
    C = dataset.num_classes
    out = {
        "accuracy": accuracy(pred, batch.labels),
        "mean_class_accuracy": mean_per_class_accuracy(pred, batch.labels, C),
        "bias_agreement": accuracy(pred, batch.bias_attr),
    }
    for k, v in out.items():
        metrics.add(epoch, split, k, v)
    metrics.add(epoch, split, "per_class_accuracy", np.nan_to_num(per_class_accuracy(pred, batch.labels, C), nan=-1.0))
    return out


def predict_in_chunks(model, dataset, chunk: int = 1024) -> np.ndarray:
    preds = []
    for start in range(0, len(dataset), chunk):
        preds.append(model.predict(dataset.batch(slice(start, start + chunk))))
    return np.concatenate(preds)


def evaluate_grid(model, datasets: dict, metrics: MetricLog | None = None, epoch: int = 0) -> dict[str, float]:
    """Accuracy of ``model`` on every named test cell."""
    shapes = {ds.images.shape[1:] for ds in datasets.values()}
    classes = {ds.num_classes for ds in datasets.values()}
    if len(shapes) > 1 or len(classes) > 1:
        raise ContractError("grid datasets must share class count and input signature")
    grid = {}
    for key in sorted(datasets, key=str):
        ds = datasets[key]
        grid[key] = accuracy(predict_in_chunks(model, ds), ds.labels)
        if metrics is not None:
            metrics.add(epoch, f"grid/{key}", "accuracy", grid[key])
    return grid


def grid_to_csv(rows: dict[str, dict[str, float]]) -> str:
    """Rows are methods, columns are test cells."""
    cols = sorted({c for r in rows.values() for c in r}, key=str)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method"] + cols)
    for name in rows:
        w.writerow([name] + [f"{rows[name][c]:.6f}" if c in rows[name] else "" for c in cols])
    return buf.getvalue()
