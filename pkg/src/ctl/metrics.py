"""Evaluation metrics: confusion-count rates, micro-F1, AUC, exact
Clopper-Pearson intervals, and the Wilcoxon signed-rank test.

Everything is computed from first principles (continued-fraction
incomplete beta, rank-sum convolution) so the package carries no
statistics dependency.  Metrics with a zero denominator are reported as
None rather than a fake zero.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_labels(cls, predictions, truths):
        if len(predictions) != len(truths):
            raise ValueError("prediction/truth length mismatch")
        tp = sum(1 for p, t in zip(predictions, truths) if p and t)
        fp = sum(1 for p, t in zip(predictions, truths) if p and not t)
        tn = sum(1 for p, t in zip(predictions, truths) if not p and not t)
        fn = sum(1 for p, t in zip(predictions, truths) if not p and t)
        return cls(tp, fp, tn, fn)


def _ratio(num, den):
    return num / den if den > 0 else None


def binary_metrics(counts):
    c = counts
    return {
        "accuracy": _ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "ppv": _ratio(c.tp, c.tp + c.fp),
        "npv": _ratio(c.tn, c.tn + c.fn),
    }


def confusion_matrix(truths, predictions, n_classes):
    if len(truths) != len(predictions):
        raise ValueError("prediction/truth length mismatch")
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(truths, predictions):
        m[t, p] += 1
    return m


def micro_f1(matrix):
    """F1 from globally pooled per-class TP/FP/FN counts."""
    m = np.asarray(matrix)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.sum() == 0:
        raise ValueError("need a non-empty square count matrix")
    tp = int(np.trace(m))
    fp = int(m.sum(axis=0).sum() - tp)  # predicted as class i but not class i
    fn = int(m.sum(axis=1).sum() - tp)
    # Single division over integer counts keeps the single-label identity
    # micro-F1 == accuracy bit-exact (denominator is then 2 * total).
    return 2.0 * tp / (2 * tp + fp + fn)


# -- ROC -----------------------------------------------------------------------


def roc_curve(scores, truths):
    """ROC staircase points from (0,0) to (1,1), ties crossed together."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    if scores.shape != truths.shape or scores.ndim != 1:
        raise ValueError("scores and truths must be matching 1-D arrays")
    pos = int(truths.sum())
    neg = len(truths) - pos
    if pos == 0 or neg == 0:
        raise ValueError("need at least one positive and one negative")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], truths[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += bool(t[j])
            fp += not t[j]
            j += 1
        points.append((fp / neg, tp / pos))
        i = j
    return points


def auc(scores, truths):
    points = roc_curve(scores, truths)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(area)


# -- Clopper-Pearson via the regularized incomplete beta ------------------------


def _betacf(a, b, x, max_iter=300, tol=1e-15):
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        num = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        num = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + num * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + num / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_incomplete_beta(a, b, x):
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return float(x)
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def beta_quantile(p, a, b, tol=1e-10):
    """Inverse of I_x(a, b) by bisection (monotone in x)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = (lo + hi) / 2.0
        if regularized_incomplete_beta(a, b, mid) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


def clopper_pearson(successes, trials, confidence=0.95):
    """Exact binomial interval; boundary cases use the closed forms."""
    x, n = successes, trials
    if n < 1 or not 0 <= x <= n:
        raise ValueError("need 0 <= successes <= trials with trials >= 1")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    alpha = 1.0 - confidence
    lower = 0.0 if x == 0 else beta_quantile(alpha / 2.0, x, n - x + 1)
    upper = 1.0 if x == n else beta_quantile(1.0 - alpha / 2.0, x + 1, n - x)
    return lower, upper


# -- Wilcoxon signed-rank --------------------------------------------------------


def _signed_ranks(differences):
    d = np.asarray(differences, dtype=np.float64)
    d = d[d != 0.0]
    if len(d) < 5:
        raise ValueError("need at least 5 non-zero differences")
    magnitudes = np.abs(d)
    order = np.argsort(magnitudes, kind="stable")
    ranks = np.empty(len(d))
    i = 0
    while i < len(d):
        j = i
        while j < len(d) and magnitudes[order[j]] == magnitudes[order[i]]:
            j += 1
        ranks[order[i:j]] = (i + j + 1) / 2.0  # average of ranks i+1 .. j
        i = j
    return d, ranks


def _exact_two_sided_p(ranks, w_neg):
    """Distribution of the negative-rank sum by convolution over doubled ranks."""
    doubled = [int(round(2.0 * r)) for r in ranks]
    total = sum(doubled)
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    observed = int(round(2.0 * w_neg))
    # two-sided: mass at least as far from the center as the observation
    distance = abs(2 * observed - total)
    extreme = sum(int(counts[s]) for s in range(total + 1)
                  if abs(2 * s - total) >= distance)
    return extreme / float(2 ** len(doubled))


def wilcoxon_signed_rank(differences, exact_limit=20):
    """(W, two-sided p) with W the negative-rank sum.

    Exact tail enumeration up to exact_limit non-zero differences, then
    the tie-corrected normal approximation with continuity correction.
    """
    d, ranks = _signed_ranks(differences)
    w_neg = float(ranks[d < 0].sum())
    n = len(d)
    if n <= exact_limit:
        return w_neg, _exact_two_sided_p(ranks, w_neg)
    mean = n * (n + 1) / 4.0
    tie_term = 0.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    for t in tie_counts:
        tie_term += t ** 3 - t
    var = (n * (n + 1) * (2 * n + 1) - tie_term / 2.0) / 24.0
    gap = abs(w_neg - mean)
    z = max(gap - 0.5, 0.0) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return w_neg, min(1.0, p)


# -- run-level reports -----------------------------------------------------------


def fold_summary(values):
    """Mean and sample (n-1) standard deviation of per-fold values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no fold values")
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std


def _proportion_entry(numerator, denominator, confidence):
    if denominator == 0:
        return {"value": None, "ci": None, "n": 0}
    low, high = clopper_pearson(numerator, denominator, confidence)
    return {"value": numerator / denominator, "ci": [low, high], "n": denominator}


def evaluate_run(predictions, truths, task, confidence=0.95, n_classes=5,
                 high_risk_indices=(3, 4)):
    """Metric bundle for one evaluation run.

    five_class: predictions and truths are class indices; reports
    accuracy and micro-F1 with a Clopper-Pearson CI on the accuracy.

    binary: predictions are high-risk probabilities, truths booleans;
    reports the 0.5-threshold confusion metrics, each with its CI, plus
    AUC.
    """
    if len(predictions) != len(truths):
        raise ValueError("prediction/truth length mismatch")
    if len(predictions) == 0:
        raise ValueError("empty run")
    if task == "five_class":
        preds = [int(p) for p in predictions]
        trs = [int(t) for t in truths]
        matrix = confusion_matrix(trs, preds, n_classes)
        hits = int(np.trace(matrix))
        total = int(matrix.sum())
        return {
            "task": task,
            "n": total,
            "accuracy": _proportion_entry(hits, total, confidence),
            "micro_f1": micro_f1(matrix),
            "confusion_matrix": matrix.tolist(),
        }
    if task == "binary":
        scores = np.asarray(predictions, dtype=np.float64)
        flags = np.asarray(truths, dtype=bool)
        counts = ConfusionCounts.from_labels(scores >= 0.5, flags)
        report = {"task": task, "n": len(scores),
                  "counts": {"tp": counts.tp, "fp": counts.fp,
                             "tn": counts.tn, "fn": counts.fn}}
        denominators = {
            "accuracy": (counts.tp + counts.tn, len(scores)),
            "sensitivity": (counts.tp, counts.tp + counts.fn),
            "specificity": (counts.tn, counts.tn + counts.fp),
            "ppv": (counts.tp, counts.tp + counts.fp),
            "npv": (counts.tn, counts.tn + counts.fn),
        }
        for name, (num, den) in denominators.items():
            report[name] = _proportion_entry(num, den, confidence)
        try:
            report["auc"] = auc(scores, flags)
        except ValueError:
            report["auc"] = None
        return report
    raise ValueError(f"unknown task {task!r}")
