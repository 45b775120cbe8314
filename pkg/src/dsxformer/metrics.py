"""Overall accuracy, average (per-class) accuracy and Cohen's kappa."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ClassificationReport:
    oa: float
    aa: float
    kappa: float
    per_class: np.ndarray  # recall per class id 1..K, NaN where the class is absent
    confusion: np.ndarray  # rows = truth, cols = prediction

    def to_dict(self):
        return {
            "OA": self.oa,
            "AA": self.aa,
            "Kappa": self.kappa,
            "per_class": {str(i + 1): (None if np.isnan(a) else float(a)) for i, a in enumerate(self.per_class)},
            "confusion": self.confusion.tolist(),
        }


def confusion_matrix(truth, pred, n_classes):
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    for name, arr in (("truth", truth), ("prediction", pred)):
        if arr.size and (arr.min() < 1 or arr.max() > n_classes):
            raise DataError(f"{name} labels must lie in 1..{n_classes}")
    C = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(C, (truth - 1, pred - 1), 1)
    return C


def metrics_from_confusion(C):
    C = np.asarray(C, dtype=np.float64)
    total = C.sum()
    if total <= 0:
        raise DataError("confusion matrix is empty")
    support = C.sum(axis=1)
    present = support > 0
    per_class = np.full(len(C), np.nan)
    per_class[present] = np.diag(C)[present] / support[present]
    if not present.all():
        missing = [int(i) + 1 for i in np.flatnonzero(~present)]
        warnings.warn(f"classes {missing} absent from truth; excluded from AA", stacklevel=2)
    p_o = np.trace(C) / total
    p_e = float(support @ C.sum(axis=0)) / (total * total)
    if np.isclose(p_e, 1.0):
        kappa = 1.0 if np.isclose(p_o, 1.0) else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return ClassificationReport(float(p_o), float(np.mean(per_class[present])), float(kappa),
                                per_class, C.astype(np.int64))


def metrics(pred, truth, n_classes=None):
    """OA, AA, kappa, per-class recall and confusion for labels in 1..K."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.size == 0 or truth.size == 0:
        raise DataError("metrics need non-empty label sequences")
    if pred.shape != truth.shape:
        raise DataError(f"prediction length {pred.shape} != truth length {truth.shape}")
    if n_classes is None:
        n_classes = int(max(pred.max(), truth.max()))
    return metrics_from_confusion(confusion_matrix(truth, pred, n_classes))
