"""Classification metrics: accuracy, macro-F1 and one-vs-rest macro-AUC."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InputError


@dataclass
class Metrics:
    accuracy: float
    macro_f1: float
    macro_auc: float | None
    confusion: np.ndarray
    per_class: dict[str, dict[str, float | int | None]] = field(default_factory=dict)
    auc_error: str | None = None

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "macro_auc": self.macro_auc,
            "per_class": self.per_class,
            "confusion": self.confusion.tolist(),
            **({"auc_error": self.auc_error} if self.auc_error else {}),
        }


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC: probability a random positive outranks a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise InputError("AUC is undefined when only one class is present")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(y_true, probs, num_classes: int | None = None) -> Metrics:
    """Metrics from true labels and an (n, C) matrix of class probabilities.

    Predictions are the arg-max class. Classes absent from both labels and
    predictions get F1 = 0 (with a warning). AUC needs every class to appear in
    ``y_true``; otherwise ``macro_auc`` is ``None`` and ``auc_error`` explains why.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    if y_true.size == 0:
        raise InputError("cannot compute metrics on an empty split")
    if probs.ndim != 2 or probs.shape[0] != y_true.size:
        raise InputError(f"probabilities of shape {probs.shape} for {y_true.size} labels")
    C = probs.shape[1] if num_classes is None else num_classes
    y_pred = probs.argmax(axis=1)
    cm = confusion_matrix(y_true, y_pred, C)
    acc = float(np.trace(cm) / cm.sum())

    per_class: dict[str, dict] = {}
    f1s = []
    absent = []
    for c in range(C):
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = cm[c, :].sum() - tp
        denom = 2 * tp + fp + fn
        if denom == 0:
            absent.append(c)
            f1 = 0.0
        else:
            f1 = float(2 * tp / denom)
        precision = float(tp / (tp + fp)) if tp + fp else 0.0
        recall = float(tp / (tp + fn)) if tp + fn else 0.0
        f1s.append(f1)
        per_class[str(c)] = {"support": int(cm[c].sum()), "precision": precision,
                             "recall": recall, "f1": f1, "auc": None}
    if absent:
        warnings.warn(f"classes {absent} absent from labels and predictions; F1 set to 0",
                      RuntimeWarning, stacklevel=2)

    aucs = []
    auc_error = None
    for c in range(C):
        try:
            auc = binary_auc(probs[:, c], y_true == c)
        except InputError:
            auc_error = "AUC undefined: the split does not contain every class"
            break
        per_class[str(c)]["auc"] = auc
        aucs.append(auc)
    macro_auc = None if auc_error else float(np.mean(aucs))
    return Metrics(acc, float(np.mean(f1s)), macro_auc, cm, per_class, auc_error)
