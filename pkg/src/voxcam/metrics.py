"""Confusion-matrix metrics, ROC/AUC and fold averaging.

The positive class is 1 ("progressive").
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ConfusionMatrix:
    tp: float = 0
    fp: float = 0
    fn: float = 0
    tn: float = 0

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> dict:
        return asdict(self)


def confusion(preds, labels) -> ConfusionMatrix:
    preds = np.asarray(preds).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels must have the same length")
    return ConfusionMatrix(
        tp=int(np.sum(preds & labels)),
        fp=int(np.sum(preds & ~labels)),
        fn=int(np.sum(~preds & labels)),
        tn=int(np.sum(~preds & ~labels)),
    )


@dataclass
class BasicMetrics:
    precision: float
    recall: float
    f1: float
    accuracy: float
    balanced_accuracy: float
    degenerate: tuple[str, ...] = ()


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def basic_metrics(cm: ConfusionMatrix) -> BasicMetrics:
    """Precision, recall, F1 and accuracy; a zero denominator yields 0 and a flag."""
    flags: list[str] = []
    precision = _ratio(cm.tp, cm.tp + cm.fp, "precision", flags)
    recall = _ratio(cm.tp, cm.tp + cm.fn, "recall", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    accuracy = _ratio(cm.tp + cm.tn, cm.total, "accuracy", flags)
    tnr = _ratio(cm.tn, cm.tn + cm.fp, "specificity", flags)
    tpr = recall if cm.tp + cm.fn else 0.0
    return BasicMetrics(precision, recall, f1, accuracy, (tpr + tnr) / 2, tuple(flags))


def f1_from(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def roc_auc(scores, labels):
    """ROC points ``[(threshold, fpr, tpr), ...]`` and trapezoidal AUC.

    A sample is called positive when its score is >= threshold. Thresholds
    are +inf (the (0, 0) corner) followed by every distinct score in
    descending order, so tied scores move the curve diagonally.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, lab = scores[order], labels[order]
    distinct = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(lab)[distinct]
    fps = np.cumsum(~lab)[distinct]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[distinct]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    curve = [(float(t), float(f), float(r)) for t, f, r in zip(thresholds, fpr, tpr)]
    return curve, auc


def roc_csv(curve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "fpr", "tpr"])
    for t, f, r in curve:
        w.writerow([repr(t), repr(f), repr(r)])
    return buf.getvalue()


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    balanced_accuracy: float
    auc: float
    confusion: ConfusionMatrix
    roc: list = field(default_factory=list)
    fold: int | str | None = None
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc"] = [list(p) for p in self.roc]
        d["degenerate"] = list(self.degenerate)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["confusion"] = ConfusionMatrix(**d["confusion"])
        d["roc"] = [tuple(p) for p in d.get("roc", [])]
        d["degenerate"] = tuple(d.get("degenerate", ()))
        return cls(**d)


def evaluate(preds, scores, labels, fold=None) -> EvalReport:
    """Full report from hard predictions and positive-class scores."""
    cm = confusion(preds, labels)
    m = basic_metrics(cm)
    try:
        curve, auc = roc_auc(scores, labels)
    except ValueError:
        curve, auc = [], float("nan")
    return EvalReport(m.accuracy, m.precision, m.recall, m.f1, m.balanced_accuracy, auc,
                      cm, curve, fold, m.degenerate)


METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "balanced_accuracy", "auc")


def aggregate_folds(reports: list[EvalReport]):
    """Arithmetic means of every metric and confusion count over folds.

    Returns ``(average_report, average_confusion, rows)`` where ``rows`` are
    the per-fold metric dicts followed by an ``Average`` row.
    """
    if not reports:
        raise ValueError("no fold reports to aggregate")
    n = len(reports)
    means = {k: sum(getattr(r, k) for r in reports) / n for k in METRIC_FIELDS}
    cm = ConfusionMatrix(*(sum(getattr(r.confusion, k) for r in reports) / n
                           for k in ("tp", "fp", "fn", "tn")))
    avg = EvalReport(confusion=cm, fold="Average", **means)
    rows = [{"fold": r.fold, **{k: getattr(r, k) for k in METRIC_FIELDS}} for r in reports]
    rows.append({"fold": "Average", **means})
    return avg, cm, rows


def table_csv(rows: list[dict], columns=("fold",) + METRIC_FIELDS) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (str, int)) or r[c] is None else f"{r[c]:.4f}" for c in columns])
    return buf.getvalue()
