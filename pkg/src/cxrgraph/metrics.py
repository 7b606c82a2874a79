"""Multi-label ranking metrics: per-class ROC AUC and top-k accuracy."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties; nan without both classes."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auc(scores, labels, mask=None):
    """Per-class AUC and their mean over evaluable classes.

    Parameters
    ----------
    scores, labels : array of shape (n_samples, n_classes)
        ``labels`` must be 0/1.
    mask : array of bool, optional
        Entries set to False are left out of their class's computation.

    Returns
    -------
    per_class : ndarray of shape (n_classes,), nan where a class lacks
        positives or negatives
    mean : float, mean over non-nan classes (nan if none)
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D shapes")
    per_class = np.empty(scores.shape[1])
    for c in range(scores.shape[1]):
        keep = slice(None) if mask is None else np.asarray(mask[:, c], dtype=bool)
        per_class[c] = binary_auc(scores[keep, c], labels[keep, c])
    valid = ~np.isnan(per_class)
    mean = float(per_class[valid].mean()) if valid.any() else float("nan")
    return per_class, mean


def topk_accuracy(scores, labels, k: int) -> float:
    """Mean over studies with a positive of |top-k ∩ positives| / min(k, #positives)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    # stable sort on -score: ties resolved by class order
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    hits = np.take_along_axis(labels, order, axis=1).sum(axis=1)
    n_pos = labels.sum(axis=1)
    keep = n_pos > 0
    if not keep.any():
        return float("nan")
    return float(np.mean(hits[keep] / np.minimum(k, n_pos[keep])))


def hard_targets(probabilities, positive_threshold: float = 1.0):
    """0/1 targets: positive iff the soft label is at least ``positive_threshold``."""
    return (np.asarray(probabilities) >= positive_threshold).astype(int)
