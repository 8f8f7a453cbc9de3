import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from anomaly3d.errors import InvalidInput, NoRegions, ShapeMismatch, SingleClass
from anomaly3d.metrics import aupro, pro_curve, roc_auc


def sweep_auroc(s, y):
    """Trapezoid area under the ROC curve traced by every distinct threshold."""
    y = y.astype(bool)
    tpr, fpr = [0.0], [0.0]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        tpr.append((pred & y).sum() / y.sum())
        fpr.append((pred & ~y).sum() / (~y).sum())
    return float(trapezoid(tpr, fpr))


def exhaustive_aupro(s, r, limit):
    ids = [i for i in np.unique(r) if i > 0]
    xs, ys = [0.0], [0.0]
    for t in np.unique(s)[::-1]:
        pred = s >= t
        xs.append(pred[r == 0].sum() / max((r == 0).sum(), 1))
        ys.append(np.mean([pred[r == i].mean() for i in ids]))
    xs, ys = np.array(xs), np.array(ys)
    grid_y = np.interp(limit, xs, ys) if xs[-1] >= limit else ys[-1]
    keep = xs <= limit
    x = np.r_[xs[keep], min(limit, xs[-1])] if xs[-1] >= limit else xs
    y = np.r_[ys[keep], grid_y] if xs[-1] >= limit else ys
    return float(trapezoid(y, x) / limit)


def test_auroc_examples():
    assert roc_auc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.1, 0.2, 0.9, 0.8], [1, 1, 0, 0]) == 0.0
    assert roc_auc([0.5] * 4, [0, 1, 0, 1]) == 0.5


def test_auroc_matches_sweep_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = rng.integers(0, 20, 200).astype(float)
        y = rng.integers(0, 2, 200)
        y[:2] = [0, 1]
        ref = sweep_auroc(s, y)
        assert abs(roc_auc(s, y) - ref) <= 1e-9 * max(ref, 1e-12)


def test_auroc_errors():
    with pytest.raises(SingleClass):
        roc_auc([1, 2], [1, 1])
    with pytest.raises(ShapeMismatch):
        roc_auc([1, 2], [1])


def test_random_scores_near_half():
    vals = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        y = np.r_[np.zeros(250), np.ones(250)]
        vals.append(roc_auc(rng.uniform(size=500), y))
    assert 0.4 <= np.mean(vals) <= 0.6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=10, max_size=60), st.integers(0, 2 ** 31))
def test_auroc_invariant_under_increasing_transform(scores, seed):
    s = np.array(scores) / 10.0
    y = np.random.default_rng(seed).integers(0, 2, len(s))
    y[:2] = [0, 1]
    a = roc_auc(s, y)
    assert 0 <= a <= 1
    assert np.isclose(a, roc_auc(np.exp(s / 50.0) * 3 + 7, y), atol=1e-12)
    assert np.isclose(roc_auc(s, 1 - y), 1 - a, atol=1e-12)


def test_aupro_perfect_and_constant():
    r = np.r_[np.zeros(80, int), np.ones(10, int), np.full(10, 2)]
    assert aupro((r > 0).astype(float), r) == 1.0
    const = np.zeros(100)
    assert np.isclose(aupro(const, r), exhaustive_aupro(const, r, 0.3), atol=1e-12)


def test_aupro_matches_exhaustive_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r = np.zeros(100, int)
        r[rng.choice(100, 10, replace=False)] = 1
        r[rng.choice(np.flatnonzero(r == 0), 7, replace=False)] = 2
        s = rng.integers(0, 30, 100).astype(float)
        for limit in (0.3, 1.0):
            ref = exhaustive_aupro(s, r, limit)
            assert abs(aupro(s, r, limit) - ref) <= 1e-9 * max(ref, 1e-12)


def test_aupro_single_region_full_limit():
    rng = np.random.default_rng(2)
    r = (rng.uniform(size=300) < 0.1).astype(int)
    s = rng.normal(size=300)
    fpr, pro = pro_curve(s, r)
    assert np.isclose(aupro(s, r, 1.0), trapezoid(pro, fpr), atol=1e-12)


def test_aupro_errors():
    with pytest.raises(NoRegions):
        aupro(np.zeros(5), np.zeros(5, int))
    with pytest.raises(InvalidInput):
        aupro(np.zeros(5), np.ones(5, int), 0.0)
