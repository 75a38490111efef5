"""Confusion matrices, balanced accuracy / specificity / sensitivity /
accuracy, and ROC AUC.

Multiclass SENS, SPEC and BACC are one-vs-rest per class then macro-averaged
over the classes present in the ground truth. Accuracy is trace / total.
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class MetricsReport:
    bacc: float
    spec: float
    sens: float
    accuracy: float
    auc: float = float("nan")
    # class ordinal -> (sens, spec, auc); classes absent from truth are omitted
    per_class: dict[int, tuple[float, float, float]] = field(default_factory=dict)

    def as_rows(self) -> list[tuple[str, float]]:
        return [("BACC", self.bacc), ("SPEC", self.spec), ("SENS", self.sens),
                ("Accuracy", self.accuracy), ("AUC", self.auc)]


def confusion_matrix(pred: Sequence[int], truth: Sequence[int], k: int = 7) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"prediction and truth lengths differ: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("no samples to score")
    for name, arr in (("prediction", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"{name} label out of range [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def one_vs_rest_counts(cm: np.ndarray, c: int) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) for class ``c``."""
    tp = int(cm[c, c])
    fn = int(cm[c].sum()) - tp
    fp = int(cm[:, c].sum()) - tp
    tn = int(cm.sum()) - tp - fn - fp
    return tp, tn, fp, fn


def summarize(cm: np.ndarray, average: str = "macro") -> MetricsReport:
    """BACC, SPEC, SENS and Accuracy from a confusion matrix (AUC left NaN).

    ``average="micro"`` pools TP/TN/FP/FN over classes instead.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    k = cm.shape[0]
    present = [c for c in range(k) if cm[c].sum() > 0]
    absent = [c for c in range(k) if c not in present]
    if absent:
        warnings.warn(f"classes {absent} absent from ground truth; excluded from averages", stacklevel=2)
    per_class = {}
    sens_list, spec_list = [], []
    pooled = [0, 0, 0, 0]
    for c in present:
        tp, tn, fp, fn = one_vs_rest_counts(cm, c)
        pooled = [a + b for a, b in zip(pooled, (tp, tn, fp, fn))]
        sens = tp / (tp + fn)
        spec = tn / (tn + fp) if tn + fp else 1.0
        sens_list.append(sens)
        spec_list.append(spec)
        per_class[c] = (sens, spec, float("nan"))
    if average == "macro":
        sens = math.fsum(sens_list) / len(sens_list)
        spec = math.fsum(spec_list) / len(spec_list)
        bacc = sens
    elif average == "micro":
        tp, tn, fp, fn = pooled
        sens = tp / (tp + fn)
        spec = tn / (tn + fp) if tn + fp else 1.0
        bacc = math.fsum(sens_list) / len(sens_list)
    else:
        raise ValueError(f"unknown averaging mode {average!r}")
    accuracy = int(np.trace(cm)) / total
    return MetricsReport(bacc=bacc, spec=spec, sens=sens, accuracy=accuracy, per_class=per_class)


def binary_summary(tp: int, tn: int, fp: int, fn: int) -> dict[str, float]:
    """The two-class formulas verbatim (with TP+TN+FP+FN as accuracy denominator)."""
    spec = tn / (tn + fp)
    sens = tp / (tp + fn)
    return {
        "BACC": ((tn / (tn + fp)) + (tp / (tp + fn))) / 2,
        "SPEC": spec,
        "SENS": sens,
        "Accuracy": (tp + tn) / (tp + tn + fp + fn),
    }


def _check_binary(scores, truth):
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth)
    if s.shape != t.shape or s.ndim != 1:
        raise ValueError("scores and truth must be 1-D and equally long")
    if not np.all(np.isin(t, (0, 1))):
        raise ValueError("binary truth must contain only 0 and 1")
    n_pos = int(np.count_nonzero(t == 1))
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs both positive and negative samples")
    return s, t.astype(bool), n_pos, n_neg


def roc_auc_binary(scores: Sequence[float], truth: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    s, t, n_pos, n_neg = _check_binary(scores, truth)
    ranks = rankdata(s)  # ties get their average rank
    u = ranks[t].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], truth: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """ROC points (fpr, tpr) from (0, 0) to (1, 1), one point per distinct threshold."""
    s, t, n_pos, n_neg = _check_binary(scores, truth)
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(t)[last]
    fps = (last + 1) - tps
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


def trapezoid_auc(fpr: np.ndarray, tpr: np.ndarray) -> float:
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc_macro(score_matrix: np.ndarray, truth: Sequence[int], average: str = "macro") -> tuple[float, dict[int, float]]:
    """One-vs-rest AUC per class present in ``truth``; returns (mean, per-class).

    ``average="micro"`` scores all (sample, class) pairs as one binary problem.
    """
    scores = np.asarray(score_matrix, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.int64)
    k = scores.shape[1]
    present = [c for c in range(k) if np.any(truth == c)]
    if len(present) < 2:
        raise ValueError("ROC AUC needs at least two classes present in the ground truth")
    if len(present) < k:
        warnings.warn(f"classes {sorted(set(range(k)) - set(present))} absent; skipped in AUC", stacklevel=2)
    per = {c: roc_auc_binary(scores[:, c], (truth == c).astype(int)) for c in present}
    if average == "micro":
        onehot = (truth[:, None] == np.arange(k)[None, :]).astype(int)
        return roc_auc_binary(scores.ravel(), onehot.ravel()), per
    if average != "macro":
        raise ValueError(f"unknown averaging mode {average!r}")
    return math.fsum(per.values()) / len(per), per


def evaluate(pred: Sequence[int], truth: Sequence[int], scores: np.ndarray | None = None, k: int = 7,
             average: str = "macro") -> tuple[MetricsReport, np.ndarray]:
    cm = confusion_matrix(pred, truth, k)
    report = summarize(cm, average)
    if scores is not None:
        report.auc, per = roc_auc_macro(scores, truth, average)
        report.per_class = {c: (se, sp, per.get(c, float("nan"))) for c, (se, sp, _) in report.per_class.items()}
    return report, cm


def write_report(path: str | os.PathLike, report: MetricsReport, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.as_rows():
            w.writerow([name, repr(float(value))])
        for c, (se, sp, auc) in sorted(report.per_class.items()):
            w.writerow([f"SENS[{class_names[c]}]", repr(float(se))])
            w.writerow([f"SPEC[{class_names[c]}]", repr(float(sp))])
            w.writerow([f"AUC[{class_names[c]}]", repr(float(auc))])


def write_confusion(path: str | os.PathLike, cm: np.ndarray, class_names: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, cm):
            w.writerow([name] + [int(x) for x in row])


def write_roc_points(path: str | os.PathLike, fpr: np.ndarray, tpr: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for a, b in zip(fpr, tpr):
            w.writerow([repr(float(a)), repr(float(b))])
