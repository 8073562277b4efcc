"""Classification metrics and the Mann-Whitney U test.

All metric functions are pure; undefined values (single-class inputs) are
returned as None, never imputed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import ContractError


@dataclass
class EvalRecord:
    """Scores (positive-class probabilities) with labels and a decision
    threshold; prediction is score > threshold, which coincides with the
    argmax over the two softmax probabilities at 0.5."""
    scores: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ContractError(
                f"scores {self.scores.shape} and labels {self.labels.shape} must be equal-length vectors")

    def counts(self) -> tuple[int, int, int, int]:
        pred = self.scores > self.threshold
        pos = self.labels == 1
        tp = int(np.sum(pred & pos))
        tn = int(np.sum(~pred & ~pos))
        fp = int(np.sum(pred & ~pos))
        fn = int(np.sum(~pred & pos))
        return tp, tn, fp, fn


def confusion_metrics(record: EvalRecord) -> tuple[float, float | None, float | None]:
    """(ACC, TPR, TNR); TPR/TNR are None when their class is absent."""
    tp, tn, fp, fn = record.counts()
    n = tp + tn + fp + fn
    if n == 0:
        raise ContractError("empty evaluation record")
    acc = (tp + tn) / n
    tpr = tp / (tp + fn) if (tp + fn) > 0 else None
    tnr = tn / (tn + fp) if (tn + fp) > 0 else None
    return acc, tpr, tnr


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=np.float64)
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float | None:
    """Rank-based AUC: P(score+ > score-) + 0.5 P(tie).  None if a class is
    missing."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = _midranks(scores)
    r_pos = float(np.sum(ranks[labels == 1]))
    return (r_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels) -> float | None:
    """Sum over descending-score thresholds of (R_k - R_{k-1}) * P_k, with
    tied scores grouped into one threshold.  None without positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(np.sum(y[i:j + 1] == 1))
        fp += (j - i + 1) - int(np.sum(y[i:j + 1] == 1))
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

def _u_from_ranksum(rank_sum: float, n1: int) -> float:
    return rank_sum - n1 * (n1 + 1) / 2.0


def mann_whitney_u(a, b, two_sided: bool = True, method: str = "auto") -> tuple[float, float]:
    """U statistic of the first sample plus the p-value.

    Ranks use midranks for ties.  method="exact" enumerates every
    C(n+m, n) assignment of the pooled values (the default for
    min(n, m) <= 8); method="normal" uses the tie-corrected normal
    approximation with continuity correction.  The one-sided p is the
    smaller-tail probability.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ContractError("both samples must be nonempty")
    if method not in ("auto", "exact", "normal"):
        raise ContractError(f"unknown method {method!r}")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u1 = _u_from_ranksum(float(np.sum(ranks[:n1])), n1)
    u2 = n1 * n2 - u1
    if np.all(pooled == pooled[0]):
        return u1, 1.0
    if method == "auto":
        method = "exact" if min(n1, n2) <= 8 else "normal"
    if method == "exact":
        p = _exact_p(ranks, n1, n2, u1, u2, two_sided)
    else:
        p = _normal_p(pooled, ranks, n1, n2, u1, u2, two_sided)
    return u1, min(p, 1.0)


def _exact_p(ranks: np.ndarray, n1: int, n2: int, u1: float, u2: float,
             two_sided: bool) -> float:
    n = n1 + n2
    u_lo, u_hi = min(u1, u2), max(u1, u2)
    total = math.comb(n, n1)
    count_le = 0
    count_ge = 0
    eps = 1e-9
    for subset in combinations(range(n), n1):
        u = _u_from_ranksum(float(sum(ranks[i] for i in subset)), n1)
        if u <= u_lo + eps:
            count_le += 1
        if u >= u_hi - eps:
            count_ge += 1
    if two_sided:
        return (count_le + count_ge) / total
    return min(count_le, count_ge) / total


def _normal_p(pooled: np.ndarray, ranks: np.ndarray, n1: int, n2: int,
              u1: float, u2: float, two_sided: bool) -> float:
    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return 1.0
    mu = n1 * n2 / 2.0
    u_hi = max(u1, u2)
    z = (u_hi - mu - 0.5) / math.sqrt(var)  # continuity correction toward the mean
    tail = 0.5 * math.erfc(z / math.sqrt(2.0))
    return 2.0 * tail if two_sided else tail
