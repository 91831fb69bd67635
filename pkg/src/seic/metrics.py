"""Clustering evaluation: ACC by optimal matching, NMI, ARI, histogram spread."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score, normalized_mutual_info_score

from .errors import LabelRangeError


def _check_labels(pred, truth, K=None):
    pred = np.asarray(pred, dtype=np.int64).ravel()
    truth = np.asarray(truth, dtype=np.int64).ravel()
    if pred.shape != truth.shape:
        raise LabelRangeError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if K is not None:
        for name, arr in (("pred", pred), ("truth", truth)):
            if arr.size and (arr.min() < 0 or arr.max() >= K):
                raise LabelRangeError(f"{name} labels outside [0, {K})")
    return pred, truth


def contingency(pred, truth, K):
    table = np.zeros((K, K), dtype=np.int64)
    np.add.at(table, (pred, truth), 1)
    return table


def clustering_accuracy(pred, truth, K=None) -> float:
    """Best fraction of agreements over one-to-one cluster->class mappings."""
    if K is None:
        K = int(max(np.max(pred), np.max(truth))) + 1
    pred, truth = _check_labels(pred, truth, K)
    if pred.size == 0:
        raise LabelRangeError("empty label vectors")
    table = contingency(pred, truth, K)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum()) / pred.size


def nmi(pred, truth) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    pred, truth = _check_labels(pred, truth)
    if np.unique(pred).size == 1 and np.unique(truth).size == 1:
        return 1.0
    return float(normalized_mutual_info_score(truth, pred, average_method="arithmetic"))


def ari(pred, truth) -> float:
    pred, truth = _check_labels(pred, truth)
    return float(adjusted_rand_score(truth, pred))


def histogram(labels, K) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise LabelRangeError(f"labels outside [0, {K})")
    return np.bincount(labels, minlength=K)


def histogram_std(labels, K) -> float:
    """Population std of the K normalized label frequencies."""
    counts = histogram(labels, K)
    return float(np.std(counts / counts.sum()))


@dataclass
class ClusteringReport:
    labels: list
    K: int
    histogram: list
    hist_std: float
    acc: float | None = None
    nmi: float | None = None
    ari: float | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def summary(self) -> str:
        parts = [f"{name.upper()}={getattr(self, name):.3f}" for name in ("nmi", "acc", "ari") if getattr(self, name) is not None]
        parts.append(f"hist_std={self.hist_std:.3f}")
        return " ".join(parts)


def evaluate(labels, K, truth=None) -> ClusteringReport:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    counts = histogram(labels, K)
    report = ClusteringReport(labels.tolist(), K, counts.tolist(), histogram_std(labels, K))
    if truth is not None:
        report.acc = clustering_accuracy(labels, truth, K)
        report.nmi = nmi(labels, truth)
        report.ari = ari(labels, truth)
    return report
