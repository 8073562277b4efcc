import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgnet.errors import ContractError
from sgnet.metrics import (EvalRecord, average_precision, confusion_metrics,
                           mann_whitney_u, roc_auc)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def auc_pairwise_bruteforce(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def ap_threshold_sweep(scores, labels):
    """Walk distinct thresholds from high to low, recomputing P/R from raw
    counts each time."""
    n_pos = int(np.sum(labels == 1))
    thresholds = sorted(set(scores.tolist()), reverse=True)
    ap = 0.0
    prev_recall = 0.0
    for t in thresholds:
        pred = scores >= t
        tp = int(np.sum(pred & (labels == 1)))
        fp = int(np.sum(pred & (labels == 0)))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def mwu_exact_enumeration(a, b, two_sided=True):
    """Definition-based: U counts pairs (a_i > b_j) + half-ties; the exact
    distribution enumerates every assignment of pooled values to group A."""
    pooled = np.concatenate([a, b])
    n1, n2 = len(a), len(b)

    def u_of(group_a, group_b):
        u = 0.0
        for x in group_a:
            for y in group_b:
                if x > y:
                    u += 1.0
                elif x == y:
                    u += 0.5
        return u

    u_obs = u_of(a, b)
    u_lo, u_hi = min(u_obs, n1 * n2 - u_obs), max(u_obs, n1 * n2 - u_obs)
    idx = set(range(n1 + n2))
    count_le = count_ge = total = 0
    for subset in combinations(range(n1 + n2), n1):
        rest = sorted(idx - set(subset))
        u = u_of(pooled[list(subset)], pooled[rest])
        total += 1
        if u <= u_lo + 1e-9:
            count_le += 1
        if u >= u_hi - 1e-9:
            count_ge += 1
    if two_sided:
        return u_obs, min(1.0, (count_le + count_ge) / total)
    return u_obs, min(1.0, min(count_le, count_ge) / total)


# ---------------------------------------------------------------------------
# confusion metrics
# ---------------------------------------------------------------------------

def test_confusion_perfect():
    rec = EvalRecord(np.array([0.9, 0.1, 0.8, 0.2]), np.array([1, 0, 1, 0]))
    assert confusion_metrics(rec) == (1.0, 1.0, 1.0)


def test_confusion_all_positive_predictions():
    rec = EvalRecord(np.array([0.9, 0.9, 0.9, 0.9]), np.array([1, 0, 1, 0]))
    acc, tpr, tnr = confusion_metrics(rec)
    assert (acc, tpr, tnr) == (0.5, 1.0, 0.0)


def test_confusion_hand_count():
    # TP=3, FN=1, TN=2, FP=2
    scores = np.array([0.9, 0.8, 0.7, 0.2, 0.6, 0.9, 0.1, 0.3])
    labels = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    acc, tpr, tnr = confusion_metrics(EvalRecord(scores, labels))
    assert acc == 0.625 and tpr == 0.75 and tnr == 0.5


def test_confusion_missing_class_is_none():
    acc, tpr, tnr = confusion_metrics(EvalRecord(np.array([0.2, 0.9]), np.array([0, 0])))
    assert tpr is None and tnr == 0.5
    assert confusion_metrics(EvalRecord(np.array([0.9]), np.array([1])))[2] is None


def test_counts_sum_to_n(rng):
    scores = rng.random(37)
    labels = rng.integers(0, 2, 37)
    rec = EvalRecord(scores, labels)
    assert sum(rec.counts()) == 37


def test_threshold_equals_argmax_rule(rng):
    logits = rng.normal(size=(50, 2))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = e / e.sum(axis=1, keepdims=True)
    pred_threshold = probs[:, 1] > 0.5
    pred_argmax = probs.argmax(axis=1).astype(bool)
    np.testing.assert_array_equal(pred_threshold, pred_argmax)


# ---------------------------------------------------------------------------
# ROC AUC
# ---------------------------------------------------------------------------

def test_auc_perfect_separation():
    assert roc_auc(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0])) == 1.0


def test_auc_all_ties_is_half():
    assert roc_auc(np.full(10, 0.5), np.array([1, 0] * 5)) == 0.5


def test_auc_single_class_missing():
    assert roc_auc(np.array([0.3, 0.7]), np.array([1, 1])) is None


def test_auc_matches_pairwise_bruteforce_on_1000_instances():
    rng = np.random.default_rng(31337)
    for _ in range(1000):
        n = int(rng.integers(4, 21))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = rng.integers(0, 2, n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        got = roc_auc(scores, labels)
        want = auc_pairwise_bruteforce(scores, labels)
        assert got == pytest.approx(want, abs=1e-12)


def test_auc_invariant_under_monotone_transform(rng):
    scores = rng.random(60)
    labels = rng.integers(0, 2, 60)
    labels[0], labels[1] = 0, 1
    base = roc_auc(scores, labels)
    for f in (lambda s: 3 * s + 1, np.exp, lambda s: s ** 3):
        assert roc_auc(f(scores), labels) == pytest.approx(base, abs=1e-12)


def test_metrics_invariant_under_joint_permutation(rng):
    scores = rng.random(40)
    labels = rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    perm = rng.permutation(40)
    assert roc_auc(scores[perm], labels[perm]) == pytest.approx(roc_auc(scores, labels), abs=1e-12)
    assert average_precision(scores[perm], labels[perm]) == pytest.approx(
        average_precision(scores, labels), abs=1e-12)
    a1 = confusion_metrics(EvalRecord(scores, labels))
    a2 = confusion_metrics(EvalRecord(scores[perm], labels[perm]))
    assert a1 == a2


# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------

def test_ap_perfect_ranking():
    assert average_precision(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0])) == 1.0


def test_ap_single_positive_ranked_last():
    n = 8
    scores = np.linspace(1.0, 0.1, n)
    labels = np.zeros(n, dtype=int)
    labels[-1] = 1
    assert average_precision(scores, labels) == pytest.approx(1.0 / n, abs=1e-12)


def test_ap_no_positives_is_none():
    assert average_precision(np.array([0.1, 0.9]), np.array([0, 0])) is None


def test_ap_matches_threshold_sweep_oracle():
    rng = np.random.default_rng(777)
    for _ in range(300):
        n = int(rng.integers(3, 25))
        scores = np.round(rng.random(n), 2)
        labels = rng.integers(0, 2, n)
        if labels.sum() == 0:
            labels[0] = 1
        got = average_precision(scores, labels)
        want = ap_threshold_sweep(scores, labels)
        assert got == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

def test_mwu_spec_example():
    u, p_two = mann_whitney_u([1, 2, 3], [4, 5, 6], two_sided=True)
    assert u == 0.0
    assert p_two == pytest.approx(0.1, abs=1e-12)
    _, p_one = mann_whitney_u([1, 2, 3], [4, 5, 6], two_sided=False)
    assert p_one == pytest.approx(1.0 / math.comb(6, 3), abs=1e-12)


def test_mwu_identical_samples():
    a = [1.0, 2.0, 3.0, 4.0]
    u, p = mann_whitney_u(a, a)
    assert u == len(a) * len(a) / 2
    assert p == 1.0


def test_mwu_all_values_identical():
    u, p = mann_whitney_u([2.0] * 5, [2.0] * 7)
    assert u == 5 * 7 / 2
    assert p == 1.0


def test_mwu_empty_sample_rejected():
    with pytest.raises(ContractError):
        mann_whitney_u([], [1.0])


def test_mwu_exact_matches_enumeration_oracle():
    rng = np.random.default_rng(4242)
    for trial in range(40):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(2, 7))
        a = np.round(rng.normal(size=n), 1)  # rounding forces ties
        b = np.round(rng.normal(size=m), 1)
        for two_sided in (True, False):
            u_got, p_got = mann_whitney_u(a, b, two_sided=two_sided, method="exact")
            u_want, p_want = mwu_exact_enumeration(a, b, two_sided=two_sided)
            assert u_got == pytest.approx(u_want, abs=1e-9), f"trial {trial}"
            assert p_got == pytest.approx(p_want, abs=1e-12), f"trial {trial}"


def test_mwu_auto_uses_exact_for_small_samples():
    a = np.array([1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0, 14.0])
    b = np.array([4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 15.0, 16.0])
    u_auto, p_auto = mann_whitney_u(a, b)
    u_exact, p_exact = mann_whitney_u(a, b, method="exact")
    assert (u_auto, p_auto) == (u_exact, p_exact)


def test_mwu_normal_approximation_sane(rng):
    a = rng.normal(0.0, 1.0, size=30)
    b = rng.normal(2.0, 1.0, size=30)
    _, p_shifted = mann_whitney_u(a, b, method="normal")
    assert 0.0 <= p_shifted < 0.001
    c = rng.normal(0.0, 1.0, size=30)
    d = rng.normal(0.0, 1.0, size=30)
    _, p_null = mann_whitney_u(c, d, method="normal")
    assert 0.01 < p_null <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-5, 5), min_size=2, max_size=6),
       st.lists(st.integers(-5, 5), min_size=2, max_size=6))
def test_mwu_group_swap_symmetry(xs, ys):
    a, b = np.array(xs, float), np.array(ys, float)
    u_ab, p_ab = mann_whitney_u(a, b, method="exact")
    u_ba, p_ba = mann_whitney_u(b, a, method="exact")
    assert u_ab + u_ba == pytest.approx(len(a) * len(b), abs=1e-9)
    assert p_ab == pytest.approx(p_ba, abs=1e-12)
