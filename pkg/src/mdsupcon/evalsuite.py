"""Metrics, the linear-probe hyperparameter sweep, run aggregation and reports.

Accuracies are fractions in [0, 1]. Standard deviations use the sample
(n-1) denominator.
"""

from __future__ import annotations

import csv
import itertools
import statistics
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .data import ImageBank, SplitSpec, resolve_splits
from .errors import ValidationError
from .models import ModelBundle, attach_classifier
from .trainer import TrainConfig, bank_features, predict_logits, train_probe

METRICS = ("top1", "mean_per_class")

# Metric conventionally reported for each downstream dataset.
DOWNSTREAM_METRICS = {
    "cifar10": "top1",
    "cifar100": "top1",
    "flowers102": "mean_per_class",
    "aircraft": "mean_per_class",
    "svhn": "top1",
    "kaokore": "top1",
    "dtd": "top1",
}

TEMPERATURE_GRID = (0.04, 0.07, 0.10, 0.13, 0.17)
AUGMENTATION_GRID = ("autoaugment", "randaugment", "simaugment", "stacked_randaugment")
ENCODER_GRID = ("small", "deep")
KNOB_DEFAULTS = {"temperature": TEMPERATURE_GRID, "augmentation": AUGMENTATION_GRID, "encoder": ENCODER_GRID}

REPORT_HEADER = ["dataset", "model", "metric", "mean", "std", "runs", "lr", "batch"]
MEAN_ROW = "__mean__"


# -- metrics -------------------------------------------------------------------

def predictions(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(np.asarray(logits), axis=1)


def top1_accuracy(logits, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("accuracy of an empty set is undefined")
    return float(np.mean(predictions(logits) == labels))


def per_class_recall(logits, labels, n_classes: int) -> tuple:
    """``(recalls, n_excluded)`` over classes present in ``labels``."""
    labels = np.asarray(labels)
    if labels.size and labels.max() >= n_classes:
        raise ValidationError(f"label outside [0, {n_classes})")
    preds = predictions(logits)
    support = np.bincount(labels, minlength=n_classes)
    hits = np.bincount(labels[preds == labels], minlength=n_classes)
    present = support > 0
    return hits[present] / support[present], int(n_classes - present.sum())


def mean_per_class_accuracy(logits, labels, n_classes: int) -> float:
    recalls, _ = per_class_recall(logits, labels, n_classes)
    if recalls.size == 0:
        raise ValidationError("accuracy of an empty set is undefined")
    return float(np.mean(recalls))


def score(logits, labels, metric: str, n_classes: int) -> float:
    if metric == "top1":
        return top1_accuracy(logits, labels)
    if metric == "mean_per_class":
        return mean_per_class_accuracy(logits, labels, n_classes)
    raise ValidationError(f"unknown metric {metric!r}")


def aggregate_runs(accuracies: Sequence[float]) -> tuple:
    """Mean and sample standard deviation; std is None for a single run."""
    values = [float(a) for a in accuracies]
    if not values:
        raise ValidationError("no runs to aggregate")
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) >= 2 else None
    return mean, std


# -- sweep ---------------------------------------------------------------------

@dataclass(frozen=True)
class SweepGrid:
    learning_rates: tuple = (0.1, 0.01, 0.001)
    batch_sizes: tuple = (32, 64, 128)

    def __post_init__(self):
        if not self.learning_rates or not self.batch_sizes:
            raise ValidationError("sweep grid must not be empty")
        if min(self.learning_rates) <= 0 or min(self.batch_sizes) <= 0:
            raise ValidationError("sweep grid values must be positive")

    def points(self) -> list:
        return list(itertools.product(self.learning_rates, self.batch_sizes))


def select_best(trace: Sequence[tuple]) -> tuple:
    """Pick ``(lr, batch)`` with the highest val accuracy; ties go to smaller lr, then smaller batch."""
    if not trace:
        raise ValidationError("empty sweep trace")
    lr, batch, _ = min(trace, key=lambda row: (-row[2], row[0], row[1]))
    return lr, batch


# ProbeFn(train_indices, eval_indices, lr, batch_size, seed) -> accuracy on eval_indices
ProbeFn = Callable[[np.ndarray, np.ndarray, float, int, int], float]


def feature_probe(
    pretrained: ModelBundle,
    bank: ImageBank,
    metric: str = "top1",
    epochs: int = 50,
    momentum: float = 0.9,
) -> ProbeFn:
    """Probe trainer over features cached once from the frozen encoder."""
    if metric not in METRICS:
        raise ValidationError(f"unknown metric {metric!r}")
    base = attach_classifier(pretrained, bank.n_classes, 0)
    feats = bank_features(base, bank)

    def probe(train_idx, eval_idx, lr, batch_size, seed):
        cfg = TrainConfig.linear(lr=lr, batch_size=int(batch_size), epochs=epochs, seed=seed, momentum=momentum)
        init = attach_classifier(pretrained, bank.n_classes, seed)
        trained, _ = train_probe(feats[train_idx], bank.classes[train_idx], bank.n_classes, cfg, init)
        return score(predict_logits(trained, feats[eval_idx]), bank.classes[eval_idx], metric, bank.n_classes)

    return probe


@dataclass
class SweepResult:
    trace: list
    lr: float
    batch: int
    test_scores: list
    split: SplitSpec

    @property
    def mean_std(self) -> tuple:
        return aggregate_runs(self.test_scores)


def sweep(
    probe: ProbeFn,
    split: SplitSpec,
    grid: SweepGrid = SweepGrid(),
    seed: int = 0,
    runs: int = 1,
    fixed: Optional[tuple] = None,
) -> SweepResult:
    """Grid-search a probe on train/val, then retrain on train+val and score the test set.

    Every grid point gets one probe training on ``split.train`` scored on
    ``split.val``. The best point is retrained ``runs`` times on
    train+val with probe seeds ``seed, seed+1, ...``. Passing ``fixed=(lr, batch)``
    skips the search.
    """
    if runs < 1:
        raise ValidationError("runs must be >= 1")
    if split.test.size == 0:
        raise ValidationError("no test records to evaluate on")
    trace = []
    if fixed is None:
        if split.train.size == 0 or split.val.size == 0:
            raise ValidationError("the sweep needs non-empty train and val splits")
        for lr, batch in grid.points():
            trace.append((lr, batch, float(probe(split.train, split.val, lr, batch, seed))))
        lr, batch = select_best(trace)
    else:
        lr, batch = fixed
    train_val = split.train_val
    scores = [float(probe(train_val, split.test, lr, batch, seed + r)) for r in range(runs)]
    return SweepResult(trace, lr, int(batch), scores, split)


def evaluate_bank(
    pretrained: ModelBundle,
    bank: ImageBank,
    metric: str = "top1",
    grid: SweepGrid = SweepGrid(),
    seed: int = 0,
    runs: int = 5,
    epochs: int = 50,
    fixed: Optional[tuple] = None,
) -> SweepResult:
    return sweep(feature_probe(pretrained, bank, metric, epochs), resolve_splits(bank, seed), grid, seed, runs, fixed)


def write_trace(trace: Sequence[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lr", "batch", "val_accuracy"])
        for lr, batch, acc in trace:
            w.writerow([f"{lr:g}", int(batch), f"{acc:.4f}"])


# -- reports -------------------------------------------------------------------

@dataclass
class ReportRow:
    dataset: str
    model: str
    metric: str
    runs: list
    lr: Optional[float] = None
    batch: Optional[int] = None
    mean: float = field(init=False)
    std: Optional[float] = field(init=False)

    def __post_init__(self):
        self.mean, self.std = aggregate_runs(self.runs)


@dataclass
class RunReport:
    rows: list = field(default_factory=list)

    def add(self, dataset: str, model: str, metric: str, result: SweepResult) -> ReportRow:
        row = ReportRow(dataset, model, metric, list(result.test_scores), result.lr, result.batch)
        self.rows.append(row)
        return row

    def model_means(self) -> dict:
        """Cross-dataset mean of dataset means, for models evaluated on >= 2 datasets."""
        by_model: dict = {}
        for r in self.rows:
            by_model.setdefault(r.model, []).append(r.mean)
        return {m: statistics.fmean(v) for m, v in by_model.items() if len(v) >= 2}


def _fmt(x) -> str:
    return "" if x is None else f"{x:.4f}"


def write_report(report: RunReport, path) -> None:
    """CSV with one row per (dataset, model) and a ``__mean__`` row per multi-dataset model."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            w.writerow([
                r.dataset, r.model, r.metric, _fmt(r.mean), _fmt(r.std),
                ";".join(_fmt(v) for v in r.runs),
                "" if r.lr is None else f"{r.lr:g}",
                "" if r.batch is None else str(r.batch),
            ])
        for model, mean in report.model_means().items():
            w.writerow([MEAN_ROW, model, "mixed", _fmt(mean), "", "", "", ""])


def read_report(path) -> list:
    def num(s, kind=float):
        return None if s == "" else kind(s)

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "dataset": r["dataset"],
            "model": r["model"],
            "metric": r["metric"],
            "mean": num(r["mean"]),
            "std": num(r["std"]),
            "runs": [float(v) for v in r["runs"].split(";")] if r["runs"] else [],
            "lr": num(r["lr"]),
            "batch": num(r["batch"], int),
        }
        for r in rows
    ]


# -- ablation ------------------------------------------------------------------

def ablate(
    pretrain_fn: Callable[[str, object], ModelBundle],
    knob: str,
    values: Optional[Sequence] = None,
    eval_banks: Mapping[str, tuple] = None,
    grid: SweepGrid = SweepGrid(),
    seed: int = 0,
    runs: int = 5,
    epochs: int = 50,
    fixed: Optional[tuple] = None,
) -> RunReport:
    """One pretraining per knob value, each followed by a full sweep on every eval bank.

    ``pretrain_fn(knob, value)`` must return the pretrained bundle with all
    other settings held fixed. ``eval_banks`` maps dataset name to
    ``(bank, metric)``. ``fixed=(lr, batch)`` skips the sweep.
    """
    if knob not in KNOB_DEFAULTS:
        raise ValidationError(f"unknown knob {knob!r}; choose from {tuple(KNOB_DEFAULTS)}")
    values = KNOB_DEFAULTS[knob] if values is None else tuple(values)
    if not values:
        raise ValidationError("no knob values given")
    if not eval_banks:
        raise ValidationError("no evaluation banks given")
    report = RunReport()
    for value in values:
        bundle = pretrain_fn(knob, value)
        for name, (bank, metric) in eval_banks.items():
            result = evaluate_bank(bundle, bank, metric, grid, seed, runs, epochs, fixed)
            report.add(name, f"{knob}={value}", metric, result)
    return report
