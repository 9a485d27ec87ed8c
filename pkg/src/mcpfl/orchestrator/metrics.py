"""Accuracy, F1 and rank-statistic AUC for binary scores."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from ..core import ModelVector
from ..datagen import MultiModalData
from ..errors import UndefinedMetric
from ..fusion import FusionPlan
from ..learner import predict_proba


def accuracy(labels, scores, threshold: float = 0.5) -> float:
    # a score exactly at the threshold counts as negative
    pred = np.asarray(scores) > threshold
    return float(np.mean(pred == (np.asarray(labels) == 1)))


def f1(labels, scores, threshold: float = 0.5) -> float:
    y = np.asarray(labels) == 1
    pred = np.asarray(scores) > threshold
    tp = np.sum(pred & y)
    if tp == 0:
        return 0.0
    precision = tp / np.sum(pred)
    recall = tp / np.sum(y)
    return float(2 * precision * recall / (precision + recall))


def auc(labels, scores) -> float:
    """Mann-Whitney U over average ranks, so tied pairs count one half."""
    y = np.asarray(labels) == 1
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes in the test set")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def score_metrics(labels, scores) -> dict[str, float]:
    return {"accuracy": accuracy(labels, scores), "f1": f1(labels, scores), "auc": auc(labels, scores)}


def evaluate(theta: ModelVector, test: MultiModalData, plan: FusionPlan) -> dict[str, float]:
    if len(test) == 0:
        raise UndefinedMetric("empty test set")
    return score_metrics(test.labels, predict_proba(test, theta, plan))
