"""Confusion matrices, per-category classification reports, and model comparison."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import LabelTaxonomy, SplitAssignment
from .models import Classifier
from .pipeline import ImageStore, make_batches

N_CATEGORIES = 6


class EvaluationError(Exception):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[i][j] = number of samples with true category i predicted as j."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.shape != (N_CATEGORIES, N_CATEGORIES) or (c < 0).any():
            raise EvaluationError(f"confusion matrix must be 6x6 non-negative, got shape {c.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_json(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


def confusion_matrix(true_labels: Sequence[int], pred_labels: Sequence[int]) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise EvaluationError("true and predicted label sequences differ in length")
    if t.size and (t.min() < 0 or t.max() >= N_CATEGORIES or p.min() < 0 or p.max() >= N_CATEGORIES):
        raise EvaluationError("labels must lie in 0..5")
    counts = np.zeros((N_CATEGORIES, N_CATEGORIES), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts=counts)


@dataclass
class CategoryMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvaluationReport:
    matrix: ConfusionMatrix
    per_category: dict[str, CategoryMetrics]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float

    def to_json(self) -> dict:
        return {
            "confusion_matrix": self.matrix.to_json(),
            "per_category": {
                name: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for name, m in self.per_category.items()
            },
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["category", "precision", "recall", "f1", "support"])
            for name, m in self.per_category.items():
                writer.writerow([name, m.precision, m.recall, m.f1, m.support])
            writer.writerow(["accuracy", self.accuracy, "", "", self.matrix.total])
            writer.writerow(["macro", self.macro_precision, self.macro_recall, self.macro_f1, ""])


def classification_report(
    matrix: ConfusionMatrix, taxonomy: LabelTaxonomy | None = None
) -> EvaluationReport:
    """Per-category precision/recall/F1 with the 0-when-undefined convention."""
    taxonomy = taxonomy or LabelTaxonomy()
    counts = matrix.counts
    total = matrix.total
    if total <= 0:
        raise EvaluationError("cannot report on an empty confusion matrix")
    col_sums = counts.sum(axis=0)
    row_sums = counts.sum(axis=1)
    per_category: dict[str, CategoryMetrics] = {}
    precisions, recalls, f1s = [], [], []
    for j in range(N_CATEGORIES):
        tp = int(counts[j, j])
        precision = tp / int(col_sums[j]) if col_sums[j] > 0 else 0.0
        recall = tp / int(row_sums[j]) if row_sums[j] > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        per_category[taxonomy.name(j)] = CategoryMetrics(precision, recall, f1, int(row_sums[j]))
        precisions.append(precision)
        recalls.append(recall)
        f1s.append(f1)
    accuracy = float(np.trace(counts)) / total
    return EvaluationReport(
        matrix=matrix,
        per_category=per_category,
        accuracy=accuracy,
        macro_precision=float(np.mean(precisions)),
        macro_recall=float(np.mean(recalls)),
        macro_f1=float(np.mean(f1s)),
    )


def evaluate(
    classifier: Classifier,
    store: ImageStore,
    split: SplitAssignment,
    partition: str = "test",
    batch_size: int = 32,
) -> EvaluationReport:
    """Deterministic evaluation: fixed id order, no augmentation."""
    ids = sorted(split.ids(partition))
    if not ids:
        raise EvaluationError(f"partition {partition!r} is empty")
    if tuple(classifier.taxonomy.categories) != tuple(store.manifest.taxonomy.categories):
        raise EvaluationError("classifier and dataset taxonomies disagree")
    trues: list[int] = []
    preds: list[int] = []
    for batch in make_batches(store, ids, batch_size=batch_size):
        _, probs = classifier.forward(batch)
        preds.extend(probs.argmax(axis=1).tolist())
        trues.extend(batch.label_indices.tolist())
    return classification_report(confusion_matrix(trues, preds), classifier.taxonomy)


@dataclass
class ComparisonRow:
    name: str
    train_accuracy: float | None
    val_accuracy: float | None
    test_accuracy: float
    macro_f1: float | None
    reproduced: bool = True


@dataclass
class ModelResult:
    name: str
    report: EvaluationReport
    train_accuracy: float | None = None
    val_accuracy: float | None = None


def reference_results() -> list[ComparisonRow]:
    """Static published accuracies shipped for context; never recomputed here."""
    doc = json.loads(resources.files("nailguard.data").joinpath("prior_results.json").read_text())
    return [
        ComparisonRow(
            name=f"{row['method']} ({row['source']})",
            train_accuracy=None,
            val_accuracy=None,
            test_accuracy=row["accuracy"] / 100.0,
            macro_f1=None,
            reproduced=False,
        )
        for row in doc["results"]
    ]


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow] = field(default_factory=list)

    def to_json(self) -> list[dict]:
        return [
            {
                "name": r.name,
                "train_accuracy": r.train_accuracy,
                "val_accuracy": r.val_accuracy,
                "test_accuracy": r.test_accuracy,
                "macro_f1": r.macro_f1,
                "reproduced": r.reproduced,
            }
            for r in self.rows
        ]

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "train_accuracy", "val_accuracy", "test_accuracy", "macro_f1", "reproduced"])
            for r in self.rows:
                writer.writerow(
                    [r.name, r.train_accuracy, r.val_accuracy, r.test_accuracy, r.macro_f1, r.reproduced]
                )

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def compare_models(results: Sequence[ModelResult], include_reference: bool = False) -> ComparisonTable:
    """Rows per evaluated model sorted by test accuracy descending (ties: name).

    With ``include_reference`` the static published rows are appended after
    the evaluated ones, flagged ``reproduced=False``.
    """
    if not results and not include_reference:
        raise EvaluationError("compare_models needs at least one result")
    rows = [
        ComparisonRow(
            name=r.name,
            train_accuracy=r.train_accuracy,
            val_accuracy=r.val_accuracy,
            test_accuracy=r.report.accuracy,
            macro_f1=r.report.macro_f1,
        )
        for r in results
    ]
    rows.sort(key=lambda r: (-r.test_accuracy, r.name))
    if include_reference:
        ref = sorted(reference_results(), key=lambda r: (-r.test_accuracy, r.name))
        rows.extend(ref)
    return ComparisonTable(rows=rows)


def save_confusion_png(matrix: ConfusionMatrix, taxonomy: LabelTaxonomy, path: str | Path) -> None:
    """Heatmap rendering of the confusion matrix."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(matrix.counts, cmap="Blues")
    ax.set_xticks(range(N_CATEGORIES), taxonomy.categories, rotation=45, ha="right")
    ax.set_yticks(range(N_CATEGORIES), taxonomy.categories)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(N_CATEGORIES):
        for j in range(N_CATEGORIES):
            ax.text(j, i, int(matrix.counts[i, j]), ha="center", va="center", fontsize=9)
    fig.colorbar(im)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
