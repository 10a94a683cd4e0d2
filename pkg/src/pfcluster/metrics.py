"""Clustering scores and wall-clock timing."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InputError


@dataclass(frozen=True)
class MetricsReport:
    homogeneity: float
    completeness: float
    v_measure: float
    ari: float
    hungarian_acc: float
    wall_time_seconds: float = 0.0


def _check_pair(true_labels, pred_labels) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(true_labels).ravel()
    p = np.asarray(pred_labels).ravel()
    if t.shape != p.shape:
        raise InputError(f"label arrays differ in length: {t.size} vs {p.size}")
    if t.size < 1:
        raise InputError("label arrays are empty")
    return t, p


def contingency(true_labels, pred_labels) -> np.ndarray:
    """Counts ``n[i, j]`` of points with the i-th true and j-th predicted label."""
    t, p = _check_pair(true_labels, pred_labels)
    _, ti = np.unique(t, return_inverse=True)
    _, pi = np.unique(p, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    # sorted so the sum does not depend on label order
    counts = np.sort(counts[counts > 0]).astype(np.float64)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _conditional_entropy(table: np.ndarray) -> float:
    """H(rows | columns) of a contingency table, natural log."""
    n = table.sum()
    col = table.sum(axis=0)
    nz = table > 0
    cells = table[nz].astype(np.float64)
    cols = np.broadcast_to(col, table.shape)[nz].astype(np.float64)
    return float(-np.sort(cells / n * np.log(cells / cols)).sum())


def v_measure(true_labels, pred_labels) -> tuple[float, float, float]:
    """Homogeneity, completeness and their harmonic mean.

    Conventions: homogeneity is 1 when the true labeling has zero entropy,
    completeness is 1 when the predicted labeling has zero entropy, and V is
    0 when both scores are 0. A DBSCAN noise label (-1) is scored as one more
    cluster.
    """
    table = contingency(true_labels, pred_labels)
    h_true = _entropy(table.sum(axis=1))
    h_pred = _entropy(table.sum(axis=0))
    h = 1.0 if h_true == 0.0 else 1.0 - _conditional_entropy(table) / h_true
    c = 1.0 if h_pred == 0.0 else 1.0 - _conditional_entropy(table.T) / h_pred
    v = 0.0 if h + c == 0.0 else 2.0 * h * c / (h + c)
    return h, c, v


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(true_labels, pred_labels) -> float:
    """Adjusted Rand index from the pair-counting closed form."""
    table = contingency(true_labels, pred_labels)
    n = table.sum()
    index = np.sort(_comb2(table).ravel()).sum()
    a = np.sort(_comb2(table.sum(axis=1))).sum()
    b = np.sort(_comb2(table.sum(axis=0))).sum()
    total = _comb2(n)
    if total == 0:
        return 1.0
    expected = a * b / total
    maximum = (a + b) / 2.0
    if maximum == expected:
        return 1.0
    return float((index - expected) / (maximum - expected))


def hungarian_accuracy(true_labels, pred_labels) -> float:
    """Best agreement fraction over one-to-one matchings of predicted to true labels."""
    table = contingency(true_labels, pred_labels)
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / table.sum())


def timed(run: Callable[[], Any]) -> tuple[Any, float]:
    """Call ``run()`` and return its result with the elapsed monotonic wall time."""
    t0 = time.perf_counter()
    result = run()
    return result, time.perf_counter() - t0


def score(true_labels, pred_labels, wall_time_seconds: float = 0.0) -> MetricsReport:
    h, c, v = v_measure(true_labels, pred_labels)
    return MetricsReport(h, c, v, ari(true_labels, pred_labels),
                         hungarian_accuracy(true_labels, pred_labels), wall_time_seconds)
