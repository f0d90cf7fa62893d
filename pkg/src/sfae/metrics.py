"""Localization and detection metrics, plus Welch's t-test.

All pixel metrics operate on flat, pooled arrays: callers concatenate every
test pixel before calling, so a metric is one global computation.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special, stats

from .exceptions import ContractError

__all__ = ["pixel_ap", "dice_at_fpr", "image_auroc", "welch_t_test"]


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isfinite(s).all():
        raise ContractError("scores must be finite")
    uniq = np.unique(y)
    if not np.isin(uniq, (0, 1)).all():
        raise ContractError("labels must be binary")
    return s, y.astype(bool)


def pixel_ap(scores, labels) -> float:
    """Average precision: sum over distinct thresholds of
    (recall increment) * precision, equal scores grouped into one threshold."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ContractError("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.diff(s) != 0)
    ends = np.append(ends, len(s) - 1)
    tp = np.cumsum(y)[ends]
    predicted = ends + 1
    precision = tp / predicted
    recall = tp / n_pos
    d_recall = np.diff(recall, prepend=0.0)
    return float(np.sum(d_recall * precision))


def _allowed_false_positives(n_neg: int, fpr: float) -> int:
    k = int(math.floor(fpr * n_neg))
    while k + 1 <= n_neg and (k + 1) / n_neg <= fpr:
        k += 1
    while k > 0 and k / n_neg > fpr:
        k -= 1
    return k


def fpr_threshold(scores, labels, fpr: float = 0.05) -> float:
    """Smallest score value t such that the fraction of negatives with
    score >= t is at most ``fpr``; ``inf`` if no score qualifies."""
    s, y = _prepare(scores, labels)
    neg = np.sort(s[~y])[::-1]
    if len(neg) == 0 or y.all():
        raise ContractError("need at least one positive and one negative label")
    k = _allowed_false_positives(len(neg), fpr)
    if k >= len(neg):
        return float(s.min())
    # any threshold <= the (k+1)-th largest negative admits too many negatives
    bound = neg[k]
    above = s[s > bound]
    return float(above.min()) if above.size else math.inf


def dice_at_fpr(scores, labels, fpr: float = 0.05) -> float:
    """Dice of the mask ``scores >= t`` where t is the 5%-FPR threshold."""
    if not 0 <= fpr <= 1:
        raise ContractError("fpr must be in [0, 1]")
    s, y = _prepare(scores, labels)
    if y.all() or not y.any():
        raise ContractError("need at least one positive and one negative label")
    t = fpr_threshold(s, y, fpr)
    pred = s >= t
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    return 2 * tp / (2 * tp + fp + fn)


def image_auroc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s, y = _prepare(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUROC needs both classes")
    ranks = stats.rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def welch_t_test(sample_a, sample_b) -> tuple[float, float]:
    """Two-sided Welch t-test; returns (t, p).

    Degrees of freedom follow Welch-Satterthwaite; the p-value is the
    regularized incomplete beta function I_{df/(df+t^2)}(df/2, 1/2).
    Two constant samples give t = 0, p = 1 when equal and t = +-inf, p = 0
    otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if len(a) < 2 or len(b) < 2:
        raise ContractError("each sample needs at least two values")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1) / len(a), b.var(ddof=1) / len(b)
    se2 = va + vb
    diff = ma - mb
    if se2 == 0:
        if diff == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    p = float(special.betainc(df / 2, 0.5, df / (df + t * t)))
    return float(t), min(1.0, p)
