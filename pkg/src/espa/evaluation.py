"""Per-class precision/recall/F1 and rank-based AUC."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    # set when a denominator was zero and the metric was reported as 0
    precision_undefined: bool = False
    recall_undefined: bool = False


@dataclass
class EvalReport:
    classes: dict[int, ClassMetrics]
    auc: float | None
    confusion: dict[str, int]
    threshold: float = 0.5

    def to_dict(self) -> dict:
        return {
            "classes": {str(k): asdict(v) for k, v in self.classes.items()},
            "auc": self.auc,
            "confusion": dict(self.confusion),
            "threshold": self.threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _ratio(num: int, den: int) -> tuple[float, bool]:
    return (num / den, False) if den > 0 else (0.0, True)


def _class_metrics(tp: int, fp: int, fn: int) -> ClassMetrics:
    p, p_undef = _ratio(tp, tp + fp)
    r, r_undef = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p > 0 and r > 0 else 0.0
    return ClassMetrics(p, r, f1, tp + fn, p_undef, r_undef)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_report(scores, labels, threshold: float = 0.5) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise ValueError("empty input")
    pred = (scores >= threshold).astype(int)
    tp = int(((pred == 1) & (labels == 1)).sum())
    fp = int(((pred == 1) & (labels == 0)).sum())
    fn = int(((pred == 0) & (labels == 1)).sum())
    tn = int(((pred == 0) & (labels == 0)).sum())
    try:
        area = auc(scores, labels)
    except UndefinedMetricError:
        area = None
    return EvalReport(
        classes={0: _class_metrics(tn, fn, fp), 1: _class_metrics(tp, fp, fn)},
        auc=area,
        confusion={"tp": tp, "fp": fp, "fn": fn, "tn": tn},
        threshold=threshold,
    )


def format_table(rows: list[tuple[str, EvalReport]]) -> str:
    """Text table with one line per (method, class), AUC on the class-0 line."""
    w = max([22] + [len(name) + 2 for name, _ in rows])
    head = f"{'Method':<{w}}{'Target':<10}{'Precision':>10}{'Recall':>9}{'F1-score':>10}{'AUC':>8}"
    lines = [head, "-" * len(head)]
    for name, rep in rows:
        for cls, tag in ((0, "0 (pass)"), (1, "1 (fail)")):
            m = rep.classes[cls]
            a = f"{rep.auc:.4f}" if (cls == 0 and rep.auc is not None) else ""
            lines.append(f"{name if cls == 0 else '':<{w}}{tag:<10}{m.precision:>10.4f}{m.recall:>9.4f}{m.f1:>10.4f}{a:>8}")
    return "\n".join(lines)


def majority_scores(train_labels, n: int) -> np.ndarray:
    """Constant score of the training majority class for ``n`` test pairs."""
    train_labels = np.asarray(train_labels)
    if train_labels.size == 0:
        raise ValueError("empty training labels")
    majority = 1.0 if train_labels.mean() > 0.5 else 0.0
    return np.full(n, majority)
