"""Evaluation statistics: ROC/AUC with midrank placements, the paired
DeLong test, bootstrap confidence intervals, Dice/IoU overlap, and
threshold sensitivity/specificity.

Everything is deterministic; the bootstrap is deterministic given its seed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError, UndefinedAuc


def _midrank(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their midrank."""
    order = np.argsort(x, kind="mergesort")
    z = x[order]
    n = len(x)
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1.0
        i = j
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks
    return out


@dataclass(frozen=True)
class RocResult:
    """AUC plus the per-sample placement values the DeLong test builds on.

    placement_pos[j] is the fraction of negatives outranked by positive j,
    placement_neg[k] the fraction of positives outranking negative k; ties
    count one half. The AUC is the mean of either vector.
    """

    auc: float
    n_pos: int
    n_neg: int
    placement_pos: np.ndarray
    placement_neg: np.ndarray


@dataclass(frozen=True)
class DeLongComparison:
    """Paired comparison of two AUCs sharing one test set."""

    auc_a: float
    auc_b: float
    variance_diff: float
    z_statistic: float
    p_value: float


def _validate_scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.ndim != 1 or y.shape != s.shape:
        raise DataError("scores and labels must be matching 1-d arrays")
    if not np.isfinite(s).all():
        raise DataError("scores contain non-finite values")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be binary")
    return s, y


def auc(scores, labels) -> RocResult:
    """Mann-Whitney AUC with midrank tie handling.

    Raises UndefinedAuc unless both classes are present.
    """
    s, y = _validate_scores_labels(scores, labels)
    pos = y == 1.0
    n_pos = int(pos.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAuc("AUC needs at least one positive and one negative")
    rank_all = _midrank(s)
    rank_pos = _midrank(s[pos])
    rank_neg = _midrank(s[~pos])
    placement_pos = (rank_all[pos] - rank_pos) / n_neg
    placement_neg = 1.0 - (rank_all[~pos] - rank_neg) / n_pos
    return RocResult(float(placement_pos.mean()), n_pos, n_neg, placement_pos, placement_neg)


def delong_test(scores_a, scores_b, labels) -> DeLongComparison:
    """Paired DeLong test for two score vectors over the same labels.

    The variance of the AUC difference comes from the sample covariance of
    the placement components; the p-value is two-sided under the standard
    normal approximation.
    """
    roc_a = auc(scores_a, labels)
    roc_b = auc(scores_b, labels)
    if roc_a.n_pos < 2 or roc_a.n_neg < 2:
        raise NumericalError("paired DeLong test needs at least two samples per class")
    d10 = roc_a.placement_pos - roc_b.placement_pos
    d01 = roc_a.placement_neg - roc_b.placement_neg
    variance = float(np.var(d10, ddof=1) / roc_a.n_pos + np.var(d01, ddof=1) / roc_a.n_neg)
    diff = roc_a.auc - roc_b.auc
    if variance <= 0.0:
        if diff == 0.0:
            return DeLongComparison(roc_a.auc, roc_b.auc, max(variance, 0.0), 0.0, 1.0)
        raise NumericalError("zero DeLong variance with unequal AUCs")
    z = diff / math.sqrt(variance)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return DeLongComparison(roc_a.auc, roc_b.auc, variance, z, p)


def bootstrap_ci(scores, labels, n_boot: int = 1000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    """Percentile bootstrap interval for the AUC.

    Resamples (score, label) pairs with replacement; a resample missing one
    of the classes is discarded and redrawn. Deterministic given the seed.
    """
    if n_boot < 100:
        raise DataError("n_boot must be at least 100")
    if not 0.0 < level < 1.0:
        raise DataError("level must lie in (0, 1)")
    s, y = _validate_scores_labels(scores, labels)
    if (y == 1.0).sum() == 0 or (y == 0.0).sum() == 0:
        raise UndefinedAuc("AUC needs at least one positive and one negative")
    rng = np.random.default_rng(seed)
    n = len(s)
    stats = np.empty(n_boot)
    for b in range(n_boot):
        while True:
            idx = rng.integers(0, n, n)
            yb = y[idx]
            if yb.min() == 0.0 and yb.max() == 1.0:
                break
        stats[b] = auc(s[idx], yb).auc
    lo_q = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [lo_q, 100.0 - lo_q])
    return float(lo), float(hi)


def dice_iou(pred_mask, true_mask) -> tuple[float, float]:
    """Dice and IoU of two binarized masks.

    Two empty masks score (1, 1) by convention, with a warning so callers
    can exclude such cases from averages if they want.
    """
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(true_mask).astype(bool)
    if a.shape != b.shape:
        raise DataError("mask shapes differ")
    inter = float(np.logical_and(a, b).sum())
    size_a = float(a.sum())
    size_b = float(b.sum())
    union = size_a + size_b - inter
    if size_a == 0.0 and size_b == 0.0:
        warnings.warn("both masks empty; Dice/IoU set to 1 by convention", RuntimeWarning)
        return 1.0, 1.0
    dice = 2.0 * inter / (size_a + size_b)
    iou = inter / union
    return dice, iou


def sensitivity_specificity(pred, truth) -> tuple[float, float]:
    """TP/P and TN/N of binarized predictions against binarized truth."""
    a = np.asarray(pred).astype(np.float64).ravel()
    t = np.asarray(truth).astype(np.float64).ravel()
    if a.shape != t.shape:
        raise DataError("prediction and truth shapes differ")
    if not np.isin(a, (0.0, 1.0)).all() or not np.isin(t, (0.0, 1.0)).all():
        raise DataError("inputs must be binarized")
    p = t.sum()
    n = len(t) - p
    if p == 0 or n == 0:
        raise DataError("truth must contain both classes")
    tp = float((a * t).sum())
    tn = float(((1.0 - a) * (1.0 - t)).sum())
    return tp / p, tn / n
