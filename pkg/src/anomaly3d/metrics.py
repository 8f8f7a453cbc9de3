"""ROC-AUC and AUPRO."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInput, NoRegions, ShapeMismatch, SingleClass


def roc_auc(scores, labels) -> float:
    """Mann-Whitney ROC area with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ShapeMismatch("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("roc_auc needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pro_curve(scores, regions):
    """FPR and mean per-region overlap at every distinct threshold.

    The curve starts at (0, 0) and adds one point per distinct score, taken
    in descending order, with "predicted" meaning score >= threshold.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    r = np.asarray(regions).reshape(-1).astype(np.int64)
    if s.shape != r.shape:
        raise ShapeMismatch("scores and regions differ in length")
    ids = np.unique(r[r > 0])
    if len(ids) == 0:
        raise NoRegions("aupro needs at least one ground-truth region")
    normal = r == 0
    n_normal = int(normal.sum())
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]  # end of each score group
    fp = np.cumsum(normal[order])[last]
    fpr = fp / n_normal if n_normal else np.zeros(len(last))
    pro = np.zeros(len(last))
    for rid in ids:
        hit = np.cumsum((r == rid)[order])[last]
        pro += hit / float(np.sum(r == rid))
    pro /= len(ids)
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def aupro(scores, regions, fpr_limit: float = 0.3) -> float:
    """Area under the PRO curve up to ``fpr_limit``, divided by the limit."""
    if not 0.0 < fpr_limit <= 1.0:
        raise InvalidInput("fpr_limit must lie in (0, 1]")
    fpr, pro = pro_curve(scores, regions)
    keep = fpr <= fpr_limit
    x, y = fpr[keep], pro[keep]
    if not keep.all():
        j = int(np.argmax(~keep))  # first point past the limit
        x0, x1, y0, y1 = fpr[j - 1], fpr[j], pro[j - 1], pro[j]
        y_lim = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
        x, y = np.r_[x, fpr_limit], np.r_[y, y_lim]
    area = float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))
    return min(max(area / fpr_limit, 0.0), 1.0)
