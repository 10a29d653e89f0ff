"""Evaluation metrics: accuracy, ROC AUC, average precision, RMSE."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .exceptions import ContractError, ShapeError

__all__ = ["EvalResult", "accuracy", "roc_auc", "average_precision", "rmse", "multitask_auc"]


@dataclass(frozen=True)
class EvalResult:
    metric: str
    value: float
    count: int
    split: str

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ContractError(f"{self.metric} on {self.split} is not finite")
        if self.count <= 0:
            raise ContractError(f"{self.metric} on {self.split} evaluated no instances")

    def to_dict(self):
        return asdict(self)


def _select(a, b, mask):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is None:
        return a.ravel(), b.ravel()
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask {mask.shape} vs values {a.shape}")
    return a[mask], b[mask]


def accuracy(pred, labels, mask=None):
    """Fraction of correct class predictions among masked entries."""
    p, y = _select(pred, labels, mask)
    if p.size == 0:
        raise ContractError("accuracy over zero instances")
    return float(np.mean(p == y))


def roc_auc(scores, labels):
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Tied scores share their average rank.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError("scores and labels must align")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("roc_auc needs both positive and negative labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels):
    """Step-interpolated area under the precision-recall curve.

    Tied scores form one threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeError("scores and labels must align")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ContractError("average_precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]  # last index of each tie group
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1.0)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def rmse(pred, target, mask=None):
    p, t = _select(np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64), mask)
    if p.size == 0:
        raise ContractError("rmse over zero instances")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def multitask_auc(scores, labels, mask):
    """Mean per-task ROC AUC over tasks that have both classes observed."""
    scores, labels, mask = np.asarray(scores), np.asarray(labels), np.asarray(mask, dtype=bool)
    if scores.ndim == 1:
        scores, labels, mask = scores[:, None], labels[:, None], mask[:, None]
    values = []
    for t in range(scores.shape[1]):
        y = labels[mask[:, t], t]
        if y.size and 0 < y.sum() < y.size:
            values.append(roc_auc(scores[mask[:, t], t], y))
    if not values:
        raise ContractError("no task has both classes observed")
    return float(np.mean(values))
