"""Accuracy, per-class precision/recall/F1, confusion matrices and seed aggregation.

All metrics are percentages kept at full precision; rounding to two decimals
happens only when tables are written.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    class_names: list[str]
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    confusion: np.ndarray  # [K, K], row = true class, percentages of the row's support
    n_seeds: int = 1
    std: dict | None = None  # same keys as the metric fields, population std over seeds
    zero_division: list[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def per_class(self) -> list[dict]:
        return [
            {"class": c, "precision": float(p), "recall": float(r), "f1": float(f), "support": float(s)}
            for c, p, r, f, s in zip(self.class_names, self.precision, self.recall, self.f1, self.support)
        ]

    def to_dict(self) -> dict:
        out = {
            "class_names": list(self.class_names),
            "accuracy": float(self.accuracy),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "support": self.support.tolist(),
            "confusion": self.confusion.tolist(),
            "n_seeds": self.n_seeds,
            "zero_division": list(self.zero_division),
            "std": None,
        }
        if self.std is not None:
            out["std"] = {k: (v.tolist() if isinstance(v, np.ndarray) else float(v)) for k, v in self.std.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        std = None
        if d.get("std") is not None:
            std = {k: (np.asarray(v) if isinstance(v, list) else v) for k, v in d["std"].items()}
        return cls(
            class_names=list(d["class_names"]),
            accuracy=float(d["accuracy"]),
            precision=np.asarray(d["precision"], dtype=np.float64),
            recall=np.asarray(d["recall"], dtype=np.float64),
            f1=np.asarray(d["f1"], dtype=np.float64),
            support=np.asarray(d["support"], dtype=np.float64),
            confusion=np.asarray(d["confusion"], dtype=np.float64),
            n_seeds=int(d.get("n_seeds", 1)),
            std=std,
            zero_division=list(d.get("zero_division", [])),
        )

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load_json(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write_csv(self, path) -> None:
        """Per-class table: Class, Precision, Recall, F1-score, Support (2 decimals)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Class", "Precision", "Recall", "F1-score", "Support"])
            for row in self.per_class:
                w.writerow([row["class"], f"{row['precision']:.2f}", f"{row['recall']:.2f}",
                            f"{row['f1']:.2f}", f"{row['support']:g}"])
            w.writerow(["accuracy", "", "", f"{self.accuracy:.2f}", f"{self.support.sum():g}"])


def compute_metrics(pred, truth, num_classes: int, class_names=None) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    k = num_classes
    if pred.shape != truth.shape or pred.ndim != 1 or len(pred) == 0:
        raise MetricsError("pred and truth must be equal-length, nonempty 1-d arrays")
    if pred.min() < 0 or truth.min() < 0 or pred.max() >= k or truth.max() >= k:
        raise MetricsError(f"labels must lie in [0, {k})")
    names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
    if len(names) != k:
        raise MetricsError("class_names must have one entry per class")

    counts = np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
    support = counts.sum(axis=1)
    if np.any(support == 0):
        missing = [names[i] for i in np.flatnonzero(support == 0)]
        raise MetricsError(f"classes without test support: {missing}")
    tp = np.diag(counts).astype(np.float64)
    predicted = counts.sum(axis=0)

    zero_div = []
    precision = np.zeros(k)
    has_pred = predicted > 0
    precision[has_pred] = 100.0 * tp[has_pred] / predicted[has_pred]
    zero_div += [names[i] for i in np.flatnonzero(~has_pred)]
    recall = 100.0 * tp / support
    denom = precision + recall
    f1 = np.zeros(k)
    nz = denom > 0
    f1[nz] = 2 * precision[nz] * recall[nz] / denom[nz]
    zero_div += [names[i] for i in np.flatnonzero(~nz) if names[i] not in zero_div]

    confusion = 100.0 * counts / support[:, None]
    accuracy = 100.0 * tp.sum() / len(truth)
    return MetricsReport(names, float(accuracy), precision, recall, f1, support.astype(np.float64),
                         confusion, zero_division=zero_div)


_AGG_FIELDS = ("precision", "recall", "f1", "support", "confusion")


def aggregate_seeds(reports) -> MetricsReport:
    """Element-wise mean and population std over runs.

    Values are sorted across runs before reduction, so the result does not
    depend on the order of ``reports`` down to the last bit.
    """
    reports = list(reports)
    if not reports:
        raise MetricsError("need at least one report")
    names = reports[0].class_names
    for r in reports[1:]:
        if r.class_names != names:
            raise MetricsError(f"class sets differ: {names} vs {r.class_names}")

    def reduce(values):
        stack = np.sort(np.stack([np.asarray(v, dtype=np.float64) for v in values]), axis=0)
        return stack.mean(axis=0), stack.std(axis=0)

    acc_mean, acc_std = reduce([r.accuracy for r in reports])
    means, stds = {}, {"accuracy": float(acc_std)}
    for name in _AGG_FIELDS:
        means[name], stds[name] = reduce([getattr(r, name) for r in reports])
    zero = sorted({c for r in reports for c in r.zero_division})
    return MetricsReport(list(names), float(acc_mean), n_seeds=len(reports), std=stds, zero_division=zero, **means)


@dataclass
class F1Table:
    classes: list[str]
    budgets: list[int]
    values: np.ndarray  # [classes, budgets]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Class"] + [str(b) for b in self.budgets])
            for c, row in zip(self.classes, self.values):
                w.writerow([c] + [f"{v:.2f}" for v in row])

    def plot(self, path, title: str = "F1 by labels per class") -> None:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(6, 4))
        for c, row in zip(self.classes, self.values):
            ax.plot(self.budgets, row, marker="o", label=c)
        ax.set_xscale("log")
        ax.set_xlabel("labels per class")
        ax.set_ylabel("F1 [%]")
        ax.set_title(title)
        ax.legend(fontsize=6, ncol=2)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def f1_by_label_budget(reports: dict, csv_path=None, plot_path=None) -> F1Table:
    """Class x budget matrix of F1; rows sorted by class name, columns by budget."""
    if not reports:
        raise MetricsError("no reports given")
    budgets = sorted(reports)
    names = sorted(reports[budgets[0]].class_names)
    for b in budgets:
        if sorted(reports[b].class_names) != names:
            raise MetricsError(f"budget {b} has a different class set")
    values = np.zeros((len(names), len(budgets)))
    for j, b in enumerate(budgets):
        rep = reports[b]
        lookup = dict(zip(rep.class_names, rep.f1))
        values[:, j] = [lookup[c] for c in names]
    table = F1Table(names, budgets, values)
    if csv_path is not None:
        table.write_csv(csv_path)
    if plot_path is not None:
        table.plot(plot_path)
    return table


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_confusion(report: MetricsReport, path, title: str | None = None) -> None:
    """Row-normalized confusion heatmap; zero cells are left blank."""
    plt = _pyplot()
    k = report.num_classes
    cm = report.confusion
    size = max(4.0, 0.45 * k + 2)
    fig, ax = plt.subplots(figsize=(size, size))
    ax.imshow(np.ma.masked_equal(cm, 0), cmap="Blues", vmin=0, vmax=100)
    for i in range(k):
        for j in range(k):
            if round(cm[i, j]) != 0:
                ax.text(j, i, f"{cm[i, j]:.0f}", ha="center", va="center", fontsize=7,
                        color="white" if cm[i, j] > 50 else "black")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xticklabels(report.class_names, rotation=90, fontsize=7)
    ax.set_yticklabels(report.class_names, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
