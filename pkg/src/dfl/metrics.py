"""Evaluation metrics: confusion matrix, balanced accuracy, Cohen kappa,
weighted F1, per-class precision/recall/F1, and PR-AUC.

PR-AUC is computed as average precision over the score-sorted sweep (ties
grouped), not trapezoidal interpolation; trapezoids over PR space are
known-optimistic. Zero-support classes are excluded from balanced accuracy
and contribute weight 0 to weighted F1.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricError


def confusion(y_true, y_pred, num_classes: int) -> np.ndarray:
    """Counts matrix [C x C]; rows are true classes, columns predictions."""
    t = np.asarray(y_true, dtype=np.int64).ravel()
    p = np.asarray(y_pred, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise MetricError(f"label arrays differ in length: {t.shape[0]} vs {p.shape[0]}")
    if num_classes < 1:
        raise MetricError("num_classes must be >= 1")
    if t.size:
        if t.min() < 0 or t.max() >= num_classes:
            raise MetricError("true label out of range")
        if p.min() < 0 or p.max() >= num_classes:
            raise MetricError("predicted label out of range")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def balanced_accuracy(cm: np.ndarray) -> float:
    """Mean of per-class recall over classes that have support."""
    cm = np.asarray(cm, dtype=np.int64)
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        raise MetricError("balanced accuracy undefined: every class is empty")
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


def cohen_kappa(cm: np.ndarray) -> float:
    """Chance-corrected agreement; 0.0 (with a warning) when chance agreement is 1."""
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.sum()
    if n == 0:
        raise MetricError("cohen kappa undefined on an empty confusion matrix")
    p_o = np.trace(cm) / n
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / (float(n) * float(n))
    if p_e >= 1.0:
        warnings.warn("cohen kappa degenerate (single class on both sides); returning 0.0")
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def per_class_metrics(cm: np.ndarray) -> list[dict]:
    """Precision, recall, F1, and support per class; 0 where undefined."""
    cm = np.asarray(cm, dtype=np.int64)
    out = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        col = cm[:, c].sum()
        row = cm[c, :].sum()
        precision = tp / col if col else 0.0
        recall = tp / row if row else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        out.append(
            {
                "precision": float(precision),
                "recall": float(recall),
                "f1": float(f1),
                "support": int(row),
            }
        )
    return out


def weighted_f1(cm: np.ndarray) -> float:
    """Support-weighted mean of per-class F1."""
    cm = np.asarray(cm, dtype=np.int64)
    n = cm.sum()
    if n == 0:
        raise MetricError("weighted F1 undefined on an empty confusion matrix")
    per = per_class_metrics(cm)
    return float(sum(m["support"] / n * m["f1"] for m in per))


def pr_auc(y_true, scores) -> float:
    """Average precision over the descending-score sweep, ties grouped.

    All samples sharing a score enter the sweep together, so the value is
    invariant under any strictly increasing transform of the scores.
    """
    t = np.asarray(y_true, dtype=np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if t.shape != s.shape:
        raise MetricError(f"labels and scores differ in length: {t.shape[0]} vs {s.shape[0]}")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise MetricError("pr_auc expects binary labels in {0, 1}")
    n_pos = int(t.sum())
    if n_pos == 0:
        raise MetricError("pr_auc undefined without positive labels")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    t_sorted = t[order]
    # Last index of each tie group along the descending sweep.
    boundaries = np.nonzero(np.diff(s_sorted))[0]
    group_ends = np.concatenate([boundaries, [t.size - 1]])

    tp = np.cumsum(t_sorted)[group_ends]
    taken = group_ends + 1
    precision = tp / taken
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


@dataclass
class EvalReport:
    """Metric bundle for one evaluation run, plus run metadata."""

    balanced_accuracy: float
    cohen_kappa: float
    weighted_f1: float
    per_class: list[dict]
    pr_auc: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "cohen_kappa": self.cohen_kappa,
            "weighted_f1": self.weighted_f1,
            "per_class": self.per_class,
            "pr_auc": self.pr_auc,
            "metadata": self.metadata,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            balanced_accuracy=d["balanced_accuracy"],
            cohen_kappa=d["cohen_kappa"],
            weighted_f1=d["weighted_f1"],
            per_class=list(d.get("per_class", [])),
            pr_auc=d.get("pr_auc"),
            metadata=dict(d.get("metadata", {})),
        )


def evaluate_predictions(
    y_true,
    y_pred,
    num_classes: int,
    proba: np.ndarray | None = None,
    positive_class: int = 1,
) -> EvalReport:
    """Full report from labels, predictions, and (optionally) probabilities.

    PR-AUC is filled for binary tasks when probabilities are given, scoring
    the positive class.
    """
    cm = confusion(y_true, y_pred, num_classes)
    auc = None
    if num_classes == 2 and proba is not None:
        t = np.asarray(y_true, dtype=np.int64)
        auc = pr_auc((t == positive_class).astype(np.int64), np.asarray(proba)[:, positive_class])
    return EvalReport(
        balanced_accuracy=balanced_accuracy(cm),
        cohen_kappa=cohen_kappa(cm),
        weighted_f1=weighted_f1(cm),
        per_class=per_class_metrics(cm),
        pr_auc=auc,
    )


def _rule(widths: list[int]) -> str:
    return "+".join([""] + ["-" * (w + 2) for w in widths] + [""])


def format_table(headers: list[str], rows: list[list[str]]) -> str:
    """Aligned plain-text table with the grid layout the report tables use."""
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [_rule(widths)]
    lines.append("|" + "|".join(f" {h:<{w}} " for h, w in zip(headers, widths)) + "|")
    lines.append(_rule(widths))
    for row in rows:
        lines.append("|" + "|".join(f" {c:<{w}} " for c, w in zip(row, widths)) + "|")
    lines.append(_rule(widths))
    return "\n".join(lines)


def format_selection_table(rows: list[dict]) -> str:
    """Backbone-comparison layout: one row per candidate, ranking order."""
    headers = ["Backbone", "Balanced Accuracy", "Cohen Kappa Score", "Weighted F1-Score"]
    body = []
    for r in rows:
        if r.get("status", "ok") != "ok":
            body.append([r["backbone_id"], "FAILED", "-", "-"])
        else:
            body.append(
                [
                    r["backbone_id"],
                    f"{r['balanced_accuracy']:.4f}",
                    f"{r['cohen_kappa']:.4f}",
                    f"{r['weighted_f1']:.4f}",
                ]
            )
    return format_table(headers, body)


def format_task_table(rows: list[dict]) -> str:
    """Biomarker-task layout: precision/recall/PR-AUC plus training time."""
    headers = ["Task", "Method", "Precision", "Recall", "PR-AUC", "Training time"]
    body = []
    for r in rows:
        body.append(
            [
                str(r.get("task", "-")),
                str(r.get("method", "-")),
                f"{r['precision']:.3f}" if r.get("precision") is not None else "-",
                f"{r['recall']:.3f}" if r.get("recall") is not None else "-",
                f"{r['pr_auc']:.3f}" if r.get("pr_auc") is not None else "-",
                str(r.get("training_time", "-")),
            ]
        )
    return format_table(headers, body)


def format_ablation_table(rows: list[dict]) -> str:
    """Augmentation-influence layout: method x noise grid."""
    headers = ["Method", "Gaussian Noise", "Val Metric", "Precision", "Recall", "PR-AUC"]
    body = []
    for r in rows:
        body.append(
            [
                str(r.get("method", "-")),
                "Yes" if r.get("noise_sigma", 0.0) > 0 else "No",
                f"{r['val_metric']:.4f}" if r.get("val_metric") is not None else "-",
                f"{r['precision']:.3f}" if r.get("precision") is not None else "-",
                f"{r['recall']:.3f}" if r.get("recall") is not None else "-",
                f"{r['pr_auc']:.3f}" if r.get("pr_auc") is not None else "-",
            ]
        )
    return format_table(headers, body)
