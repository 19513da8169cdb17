"""Metric oracles: pair counting for AUC, enumeration for Wilcoxon,
published-interval agreement for Clopper-Pearson."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctl.metrics import (ConfusionCounts, auc, beta_quantile, binary_metrics,
                         clopper_pearson, confusion_matrix, evaluate_run,
                         fold_summary, micro_f1, regularized_incomplete_beta,
                         roc_curve, wilcoxon_signed_rank)
from ctl.rng import Stream


def _auc_pair_oracle(scores, truths):
    """Mann-Whitney: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = [s for s, t in zip(scores, truths) if t]
    neg = [s for s, t in zip(scores, truths) if not t]
    wins = ties = 0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1
            elif p == q:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def _wilcoxon_enumeration_oracle(differences):
    """Two-sided exact p over all 2^n sign assignments of the ranks."""
    d = np.asarray(differences, dtype=float)
    d = d[d != 0]
    mags = np.abs(d)
    order = np.argsort(mags, kind="stable")
    ranks = np.empty(len(d))
    i = 0
    while i < len(d):
        j = i
        while j < len(d) and mags[order[j]] == mags[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0
        i = j
    w_obs = ranks[d < 0].sum()
    total = ranks.sum()
    dist_obs = abs(2 * w_obs - total)
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        w = sum(r for r, s in zip(ranks, signs) if s)
        if abs(2 * w - total) >= dist_obs - 1e-9:
            hits += 1
    return w_obs, hits / 2.0 ** len(d)


# -- confusion counts -----------------------------------------------------------


def test_counts_from_labels():
    counts = ConfusionCounts.from_labels([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert (counts.tp, counts.fp, counts.tn, counts.fn) == (2, 1, 1, 1)
    with pytest.raises(ValueError):
        ConfusionCounts.from_labels([1], [1, 0])
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1, fp=0, tn=0, fn=0)


def test_binary_metrics_worked_example():
    m = binary_metrics(ConfusionCounts(tp=8, fp=2, tn=5, fn=1))
    assert m["accuracy"] == 13 / 16
    assert m["sensitivity"] == 8 / 9
    assert m["specificity"] == 5 / 7
    assert m["ppv"] == 8 / 10
    assert m["npv"] == 5 / 6


def test_binary_metrics_absent_is_none_not_zero():
    m = binary_metrics(ConfusionCounts(tp=0, fp=0, tn=4, fn=0))
    assert m["sensitivity"] is None
    assert m["ppv"] is None
    assert m["specificity"] == 1.0


def test_confusion_matrix_layout():
    m = confusion_matrix(truths=[0, 0, 1, 2], predictions=[0, 1, 1, 0], n_classes=3)
    assert m.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]


# -- micro F1 ---------------------------------------------------------------------


def test_micro_f1_equals_accuracy_for_single_label():
    # single-label pooled FP total == FN total, so micro-F1 collapses to accuracy
    stream = Stream(1, "f1")
    for _ in range(100):
        n = 5 + int(stream.randint(50))
        truths = [int(stream.randint(5)) for _ in range(n)]
        preds = [int(stream.randint(5)) for _ in range(n)]
        m = confusion_matrix(truths, preds, 5)
        accuracy = np.trace(m) / m.sum()
        assert micro_f1(m) == accuracy


def test_micro_f1_validation():
    with pytest.raises(ValueError):
        micro_f1(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        micro_f1(np.ones((2, 3)))


# -- ROC / AUC ---------------------------------------------------------------------


def test_auc_perfect_and_inverted_and_chance():
    scores = [0.9, 0.8, 0.2, 0.1]
    assert auc(scores, [True, True, False, False]) == 1.0
    assert auc(scores, [False, False, True, True]) == 0.0
    assert auc([0.5, 0.5, 0.5, 0.5], [True, False, True, False]) == 0.5


def test_auc_matches_pair_counting_oracle():
    stream = Stream(2, "auc")
    for trial in range(100):
        n = 10 + int(stream.randint(40))
        # quantized scores force plenty of ties
        scores = np.round(stream.uniform_field((n,)), 1)
        truths = stream.uniform_field((n,)) < 0.5
        if truths.all() or not truths.any():
            truths[0] = ~truths[0]
        got = auc(scores.tolist(), truths.tolist())
        want = _auc_pair_oracle(scores.tolist(), truths.tolist())
        assert abs(got - want) < 1e-12, trial


def test_auc_complement_symmetry():
    stream = Stream(3, "auc-sym")
    scores = stream.uniform_field((30,))
    truths = stream.uniform_field((30,)) < 0.4
    truths[0] = True
    truths[1] = False
    assert abs(auc(scores, truths) + auc(scores, ~truths) - 1.0) < 1e-12


def test_auc_is_rank_statistic():
    # any strictly monotone transform of the scores leaves the AUC alone
    stream = Stream(4, "auc-rank")
    scores = stream.uniform_field((25,))
    truths = stream.uniform_field((25,)) < 0.5
    truths[0], truths[1] = True, False
    assert auc(scores, truths) == auc(np.exp(3.0 * scores), truths)


def test_roc_curve_endpoints_and_monotonicity():
    stream = Stream(5, "roc")
    scores = np.round(stream.uniform_field((40,)), 1)
    truths = stream.uniform_field((40,)) < 0.5
    truths[0], truths[1] = True, False
    points = roc_curve(scores, truths)
    assert points[0] == (0.0, 0.0)
    assert points[-1] == (1.0, 1.0)
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    assert xs == sorted(xs)
    assert ys == sorted(ys)


def test_roc_rejects_single_class():
    with pytest.raises(ValueError):
        roc_curve([0.1, 0.9], [True, True])


# -- incomplete beta / Clopper-Pearson ------------------------------------------------


def test_incomplete_beta_closed_forms():
    # I_x(1, 1) = x; I_x(1, b) = 1 - (1-x)^b; I_x(a, 1) = x^a
    for x in (0.0, 0.2, 0.5, 0.9, 1.0):
        assert abs(regularized_incomplete_beta(1, 1, x) - x) < 1e-14
        assert abs(regularized_incomplete_beta(1, 3, x) - (1 - (1 - x) ** 3)) < 1e-13
        assert abs(regularized_incomplete_beta(4, 1, x) - x ** 4) < 1e-13


def test_incomplete_beta_symmetry_identity():
    stream = Stream(6, "beta")
    for _ in range(50):
        a = 0.5 + 20 * stream.random()
        b = 0.5 + 20 * stream.random()
        x = stream.random()
        lhs = regularized_incomplete_beta(a, b, x)
        rhs = 1.0 - regularized_incomplete_beta(b, a, 1.0 - x)
        assert abs(lhs - rhs) < 1e-12


def test_incomplete_beta_is_binomial_tail():
    # sum_{k=x}^{n} C(n,k) p^k (1-p)^(n-k) = I_p(x, n - x + 1)
    n, x, p = 12, 5, 0.37
    tail = sum(math.comb(n, k) * p**k * (1 - p) ** (n - k) for k in range(x, n + 1))
    assert abs(regularized_incomplete_beta(x, n - x + 1, p) - tail) < 1e-13


def test_beta_quantile_inverts():
    for (a, b) in ((2, 5), (10, 3), (0.5, 0.5)):
        for p in (0.025, 0.5, 0.975):
            x = beta_quantile(p, a, b)
            assert abs(regularized_incomplete_beta(a, b, x) - p) < 1e-8


def test_clopper_pearson_published_value():
    # 54 successes in 59 trials at 95%: interval (81.32%, 97.19%)
    low, high = clopper_pearson(54, 59)
    assert abs(low - 0.8132) < 5e-4
    assert abs(high - 0.9719) < 5e-4


def test_clopper_pearson_boundaries_exact():
    low, high = clopper_pearson(0, 10)
    assert low == 0.0
    assert abs(high - (1.0 - 0.025 ** (1 / 10))) < 1e-9
    low, high = clopper_pearson(10, 10)
    assert high == 1.0
    assert abs(low - 0.025 ** (1 / 10)) < 1e-9


def test_clopper_pearson_contains_point_estimate():
    stream = Stream(7, "cp")
    for _ in range(50):
        n = 1 + int(stream.randint(100))
        x = int(stream.randint(n + 1))
        low, high = clopper_pearson(x, n)
        assert low <= x / n <= high


def test_clopper_pearson_width_shrinks_with_n():
    widths = []
    for n in (10, 40, 160, 640):
        low, high = clopper_pearson(int(0.8 * n), n)
        widths.append(high - low)
    assert widths == sorted(widths, reverse=True)


def test_clopper_pearson_validation():
    with pytest.raises(ValueError):
        clopper_pearson(5, 0)
    with pytest.raises(ValueError):
        clopper_pearson(6, 5)
    with pytest.raises(ValueError):
        clopper_pearson(1, 5, confidence=1.0)


# -- Wilcoxon ---------------------------------------------------------------------


def test_wilcoxon_matches_enumeration_exactly():
    stream = Stream(8, "wilcoxon")
    for trial in range(25):
        n = 5 + int(stream.randint(8))  # up to 12 non-zero differences
        d = np.round(stream.normal_field((n,)), 1)
        d[d == 0.0] = 0.3  # keep n fixed
        w_got, p_got = wilcoxon_signed_rank(d)
        w_want, p_want = _wilcoxon_enumeration_oracle(d)
        assert w_got == w_want, trial
        assert abs(p_got - p_want) < 1e-12, trial


def test_wilcoxon_sign_antisymmetry():
    stream = Stream(9, "wilcoxon-sign")
    d = stream.normal_field((10,))
    w_pos, p_pos = wilcoxon_signed_rank(d)
    w_neg, p_neg = wilcoxon_signed_rank(-d)
    assert abs(p_pos - p_neg) < 1e-12
    total = 10 * 11 / 2
    assert abs(w_pos + w_neg - total) < 1e-9


def test_wilcoxon_all_one_sided_is_extreme():
    d = np.array([1.0, 2.0, 0.5, 3.0, 1.5])
    w, p = wilcoxon_signed_rank(d)
    assert w == 0.0
    assert abs(p - 2.0 / 32.0) < 1e-12  # both all-positive and all-negative worlds


def test_wilcoxon_normal_path_close_to_exact():
    stream = Stream(10, "wilcoxon-norm")
    d = stream.normal_field((21,)) + 0.3
    w_norm, p_norm = wilcoxon_signed_rank(d, exact_limit=20)  # normal branch
    _, p_exact = wilcoxon_signed_rank(d, exact_limit=25)      # exact branch
    assert abs(p_norm - p_exact) < 0.02


def test_wilcoxon_requires_five_nonzero():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank([1.0, -1.0, 0.0, 0.0, 2.0, 0.0])


def test_wilcoxon_zero_differences_dropped():
    w_a, p_a = wilcoxon_signed_rank([1.0, -2.0, 3.0, -4.0, 5.0, 0.0, 0.0])
    w_b, p_b = wilcoxon_signed_rank([1.0, -2.0, 3.0, -4.0, 5.0])
    assert (w_a, p_a) == (w_b, p_b)


# -- summaries ---------------------------------------------------------------------


def test_fold_summary_mean_and_sample_std():
    mean, std = fold_summary([0.9, 0.8, 0.7])
    assert abs(mean - 0.8) < 1e-12
    assert abs(std - 0.1) < 1e-12
    mean, std = fold_summary([0.5])
    assert (mean, std) == (0.5, 0.0)
    with pytest.raises(ValueError):
        fold_summary([])


def test_evaluate_run_five_class_schema():
    report = evaluate_run([0, 1, 2, 3, 4, 0], [0, 1, 2, 3, 3, 1], "five_class")
    assert report["task"] == "five_class"
    assert report["n"] == 6
    acc = report["accuracy"]
    assert acc["value"] == 4 / 6
    assert acc["n"] == 6
    assert acc["ci"][0] <= acc["value"] <= acc["ci"][1]
    assert abs(report["micro_f1"] - 4 / 6) < 1e-15
    m = np.array(report["confusion_matrix"])
    assert m.shape == (5, 5)
    assert m.sum() == 6


def test_evaluate_run_binary_schema():
    scores = [0.9, 0.8, 0.3, 0.6, 0.2, 0.1]
    flags = [True, True, False, False, False, True]
    report = evaluate_run(scores, flags, "binary")
    counts = report["counts"]
    assert counts == {"tp": 2, "fp": 1, "tn": 2, "fn": 1}
    for name in ("accuracy", "sensitivity", "specificity", "ppv", "npv"):
        entry = report[name]
        assert entry["ci"][0] <= entry["value"] <= entry["ci"][1]
    assert abs(report["auc"] - _auc_pair_oracle(scores, flags)) < 1e-12


def test_evaluate_run_binary_single_class_auc_is_none():
    report = evaluate_run([0.9, 0.7], [True, True], "binary")
    assert report["auc"] is None
    assert report["specificity"]["value"] is None


def test_evaluate_run_validation():
    with pytest.raises(ValueError):
        evaluate_run([], [], "binary")
    with pytest.raises(ValueError):
        evaluate_run([1], [1, 2], "five_class")
    with pytest.raises(ValueError):
        evaluate_run([1], [1], "three_class")


@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=4, max_size=60))
@settings(max_examples=80, deadline=None)
def test_auc_oracle_property(pairs):
    scores = [round(s, 2) for s, _ in pairs]
    truths = [t for _, t in pairs]
    if all(truths) or not any(truths):
        return
    assert abs(auc(scores, truths) - _auc_pair_oracle(scores, truths)) < 1e-12
