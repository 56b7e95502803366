"""Detection and localization metrics.

AUROC uses the rank (Mann-Whitney) formulation: the probability that a
random positive outranks a random negative, ties credited 0.5. Threshold
selection scans midpoints between consecutive distinct scores plus one
candidate below the minimum (predict everything positive).
"""

from __future__ import annotations

import numpy as np


def _validate(scores, labels, need_both_classes=True):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.shape}) and labels ({y.shape}) differ in length")
    if s.size == 0:
        raise ValueError("empty score list")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if need_both_classes and (y.min() == y.max()):
        raise ValueError("need both classes present")
    return s, y


def _average_ranks(values):
    """1-based ranks with ties averaged."""
    order = np.argsort(values, kind="mergesort")
    sorted_v = values[order]
    ranks = np.empty(len(values))
    boundaries = np.flatnonzero(np.diff(sorted_v)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(values)]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b - 1) + 1
    return ranks


def auroc(scores, labels):
    """Probability a random positive outranks a random negative."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    rank_sum = _average_ranks(s)[y == 1].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def f1_optimal_threshold(scores, labels):
    """(threshold, f1) maximizing F1 of the rule ``score > threshold``.

    Candidates are midpoints between consecutive distinct scores plus a
    below-minimum candidate; ties pick the lowest threshold.
    """
    s, y = _validate(scores, labels, need_both_classes=False)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("need at least one positive to optimize F1")
    order = np.argsort(s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    cum_pos = np.concatenate([[0], np.cumsum(y_sorted)])
    distinct = np.flatnonzero(np.diff(s_sorted)) + 1  # counts below threshold
    below_counts = np.concatenate([[0], distinct])
    thresholds = np.concatenate(
        [[s_sorted[0] - 1.0], 0.5 * (s_sorted[distinct - 1] + s_sorted[distinct])]
    )
    tp = n_pos - cum_pos[below_counts]
    fn = cum_pos[below_counts]
    fp = (len(s) - below_counts) - tp
    f1 = 2.0 * tp / np.maximum(2.0 * tp + fp + fn, 1e-300)
    best = int(np.argmax(f1))
    return float(thresholds[best]), float(f1[best])


def error_rates(scores, labels, threshold):
    """(FPR, FNR) of the rule ``score > threshold``."""
    s, y = _validate(scores, labels)
    pred = s > threshold
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tp = int(np.sum(pred & (y == 1)))
    return fp / (fp + tn), fn / (fn + tp)


def score_histogram(scores, labels, bins):
    """Per-class counts over shared bin edges spanning all scores.

    Returns (edges, normal_counts, anomaly_counts).
    """
    if bins < 1:
        raise ValueError("need at least one bin")
    s, y = _validate(scores, labels, need_both_classes=False)
    lo, hi = float(s.min()), float(s.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    normal, _ = np.histogram(s[y == 0], bins=edges)
    anomal, _ = np.histogram(s[y == 1], bins=edges)
    return edges, normal, anomal
