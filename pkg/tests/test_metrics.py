import itertools

import numpy as np
import pytest
from scipy import stats

from sfae.exceptions import ContractError
from sfae.metrics import dice_at_fpr, fpr_threshold, image_auroc, pixel_ap, welch_t_test


# -- brute-force oracles: enumerate thresholds / pairs directly

def ap_oracle(s, y):
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s), reverse=True):
        pred = [si >= t for si in s]
        tp = sum(p and yi for p, yi in zip(pred, y))
        fp = sum(p and not yi for p, yi in zip(pred, y))
        recall = tp / sum(y)
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def dice_oracle(s, y, fpr):
    n_neg = sum(1 for yi in y if not yi)
    for t in sorted(set(s)) + [np.inf]:
        fp = sum(1 for si, yi in zip(s, y) if si >= t and not yi)
        if fp <= fpr * n_neg:
            tp = sum(1 for si, yi in zip(s, y) if si >= t and yi)
            fn = sum(1 for si, yi in zip(s, y) if si < t and yi)
            return 2 * tp / (2 * tp + fp + fn)


def auroc_oracle(s, y):
    pos = [si for si, yi in zip(s, y) if yi]
    neg = [si for si, yi in zip(s, y) if not yi]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def random_cases(n_cases, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_cases:
        n = int(rng.integers(2, 13))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            continue
        s = rng.random(n)
        if rng.random() < 0.5:
            s = np.round(s, 1)  # force ties
        out.append((s.tolist(), y.tolist()))
    return out


def test_oracle_equivalence():
    for s, y in random_cases(500):
        assert pixel_ap(s, y) == pytest.approx(ap_oracle(s, y), abs=1e-12)
        assert image_auroc(s, y) == pytest.approx(auroc_oracle(s, y), abs=1e-12)
        for fpr in (0.0, 0.05, 0.2, 0.5):
            assert dice_at_fpr(s, y, fpr) == pytest.approx(dice_oracle(s, y, fpr), abs=1e-12)


def test_ap_examples():
    assert pixel_ap([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(0.5 + 0.5 * 2 / 3)
    y = np.r_[np.ones(19), np.zeros(981)]
    assert pixel_ap(y, y) == 1.0
    assert pixel_ap(np.full(1000, 0.3), y) == pytest.approx(0.019, abs=0)


def test_dice_examples():
    neg = np.arange(100) / 100
    y = np.r_[np.zeros(100), np.ones(10)]
    s = np.r_[neg, np.full(10, 0.90)]
    assert fpr_threshold(s, y, 0.05) == pytest.approx(0.95)
    assert dice_at_fpr(s, y, 0.05) == 0.0
    assert dice_at_fpr(s, y, 0.01) == 0.0
    s = np.r_[neg, np.full(10, 0.96)]
    assert dice_at_fpr(s, y, 0.05) == pytest.approx(0.8)
    assert dice_at_fpr(y, y, 0.05) == 1.0
    assert dice_at_fpr(y, y, 0.0) == 1.0
    assert dice_at_fpr(np.full(110, 0.5), y) == 0.0


def test_auroc_examples(rng):
    assert image_auroc([0.9, 0.1], [1, 0]) == 1.0
    assert image_auroc([0.5, 0.5, 0.3], [1, 0, 0]) == 0.75
    y = rng.integers(0, 2, 20000)
    assert image_auroc(rng.random(20000), y) == pytest.approx(0.5, abs=0.02)


def test_monotone_invariance_and_complement(rng):
    for s, y in random_cases(50, seed=3):
        s = np.asarray(s)
        t = np.exp(3 * s) - 7
        assert pixel_ap(t, y) == pytest.approx(pixel_ap(s, y), abs=1e-12)
        assert dice_at_fpr(t, y) == pytest.approx(dice_at_fpr(s, y), abs=1e-12)
        assert image_auroc(t, y) == pytest.approx(image_auroc(s, y), abs=1e-12)
        assert image_auroc(s, y) + image_auroc(-s, y) == pytest.approx(1.0, abs=1e-9)


def test_random_scores_ap_near_prevalence(rng):
    y = (rng.random(20000) < 0.05).astype(int)
    s = rng.random(y.size)
    perms = [pixel_ap(rng.permutation(s), y) for _ in range(30)]
    mu, sd = np.mean(perms), np.std(perms)
    assert abs(pixel_ap(s, y) - mu) <= 3 * sd + 1e-12
    assert abs(mu - y.mean()) <= 3 * sd + 1e-3


@pytest.mark.parametrize("fn", [pixel_ap, dice_at_fpr, image_auroc])
def test_degenerate_labels(fn):
    with pytest.raises(ContractError):
        fn([0.1, 0.2], [0, 0])
    with pytest.raises(ContractError):
        fn([0.1, 0.2, 0.3], [0, 1])
    with pytest.raises(ContractError):
        fn([0.1, np.nan], [0, 1])
    with pytest.raises(ContractError):
        fn([0.1, 0.2], [0, 2])


def test_welch_examples(rng):
    assert welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == (0.0, 1.0)
    assert welch_t_test([0.5] * 5, [0.5] * 5) == (0.0, 1.0)
    t, p = welch_t_test([0.0] * 5, 1 + 1e-6 * rng.standard_normal(5))
    assert p < 1e-4 and t < 0
    a, b = rng.normal(0, 1, 7), rng.normal(0.5, 2, 9)
    ref = stats.ttest_ind(a, b, equal_var=False)
    t, p = welch_t_test(a, b)
    assert t == pytest.approx(ref.statistic, rel=1e-10)
    assert p == pytest.approx(ref.pvalue, rel=1e-8)
    with pytest.raises(ContractError):
        welch_t_test([1.0], [1.0, 2.0])


def test_welch_calibrated_under_null():
    rng = np.random.default_rng(7)
    ps = [welch_t_test(rng.standard_normal(5), rng.standard_normal(5))[1] for _ in range(1000)]
    assert stats.kstest(ps, "uniform").pvalue > 0.01
