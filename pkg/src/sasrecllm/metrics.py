"""Ranking and calibration metrics: AUC, per-user AUC, log loss, confusion.

AUC uses the Mann-Whitney rank-sum form (ties credited 0.5 per pair), which
matches the pairwise double loop exactly while running in O(N log N). A
constant predictor therefore lands at 0.5, the conventional "random guessing"
anchor. Undefined metrics (single-class inputs) are flagged, never coerced
to a number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOGLOSS_CLAMP = 1e-7

METRIC_COLUMNS = ["auc", "uauc", "logloss", "precision", "recall", "f1", "accuracy"]


@dataclass(frozen=True)
class ScoredExample:
    """One prediction: user id, binary label, model probability."""

    user: int
    label: int
    score: float

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score!r}")


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricReport:
    """One evaluation pass. NaN marks an undefined value; check the flags."""

    auc: float = float("nan")
    uauc: float = float("nan")
    logloss: float = float("nan")
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    accuracy: float = 0.0
    auc_undefined: bool = False
    uauc_skipped_users: int = 0
    uauc_undefined: bool = False
    zero_division_flags: list[str] = field(default_factory=list)
    stddevs: dict[str, float] = field(default_factory=dict)

    def csv_row(self, ndigits: int = 6) -> list[str]:
        def fmt(x: float) -> str:
            return "" if isinstance(x, float) and math.isnan(x) else f"{x:.{ndigits}f}"

        return [fmt(getattr(self, c)) for c in METRIC_COLUMNS]

    def as_dict(self) -> dict[str, float]:
        return {c: getattr(self, c) for c in METRIC_COLUMNS}


def auc_pairwise_oracle(examples: list[ScoredExample]) -> float:
    """The literal double loop over positive x negative pairs (ties 0.5)."""
    pos = [e.score for e in examples if e.label == 1]
    neg = [e.score for e in examples if e.label == 0]
    if not pos or not neg:
        raise ValueError("AUC needs both classes")
    hits = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                hits += 1.0
            elif sp == sn:
                hits += 0.5
    return hits / (len(pos) * len(neg))


def compute_auc(examples: list[ScoredExample]) -> tuple[float, bool]:
    """(auc, undefined_flag). Rank-sum statistic, ties share 0.5 credit."""
    labels = np.array([e.label for e in examples], dtype=np.int64)
    scores = np.array([e.score for e in examples], dtype=np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan"), True
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # midranks: average rank within each tie group (1-based)
    ranks = np.empty(labels.size, dtype=np.float64)
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[labels == 1].sum())
    auc = (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    return auc, False


def compute_uauc(examples: list[ScoredExample]) -> tuple[float, int, bool]:
    """(uauc, skipped_users, undefined_flag): mean per-user AUC.

    Users lacking both classes are skipped and counted; with no qualifying
    user the value is undefined.
    """
    by_user: dict[int, list[ScoredExample]] = {}
    for e in examples:
        by_user.setdefault(e.user, []).append(e)
    aucs = []
    skipped = 0
    for user in sorted(by_user):
        auc, undefined = compute_auc(by_user[user])
        if undefined:
            skipped += 1
        else:
            aucs.append(auc)
    if not aucs:
        return float("nan"), skipped, True
    return float(np.mean(aucs)), skipped, False


def compute_log_loss(examples: list[ScoredExample]) -> float:
    """Mean clamped binary cross-entropy over the examples."""
    if not examples:
        raise ValueError("log loss needs at least one example")
    total = 0.0
    for e in examples:
        p = min(max(e.score, LOGLOSS_CLAMP), 1.0 - LOGLOSS_CLAMP)
        total += -(e.label * math.log(p) + (1 - e.label) * math.log(1.0 - p))
    return total / len(examples)


def confusion_report(
    examples: list[ScoredExample], threshold: float = 0.5
) -> tuple[ConfusionCounts, dict[str, float], list[str]]:
    """Threshold at 0.5 (predict 1 iff score >= threshold) and count.

    Zero-denominator metrics come back 0.0 with the metric name flagged.
    """
    if not examples:
        raise ValueError("confusion metrics need at least one example")
    c = ConfusionCounts()
    for e in examples:
        pred = 1 if e.score >= threshold else 0
        if pred == 1 and e.label == 1:
            c.tp += 1
        elif pred == 0 and e.label == 0:
            c.tn += 1
        elif pred == 1 and e.label == 0:
            c.fp += 1
        else:
            c.fn += 1
    flags: list[str] = []

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if (precision + recall) > 0
        else (flags.append("f1") or 0.0)
    )
    accuracy = (c.tp + c.tn) / c.total
    return c, {"precision": precision, "recall": recall, "f1": f1, "accuracy": accuracy}, flags


def evaluate_examples(examples: list[ScoredExample], threshold: float = 0.5) -> MetricReport:
    """All metrics over one (label, score) set."""
    report = MetricReport()
    report.auc, report.auc_undefined = compute_auc(examples)
    report.uauc, report.uauc_skipped_users, report.uauc_undefined = compute_uauc(examples)
    report.logloss = compute_log_loss(examples)
    _, ratios, flags = confusion_report(examples, threshold)
    report.precision = ratios["precision"]
    report.recall = ratios["recall"]
    report.f1 = ratios["f1"]
    report.accuracy = ratios["accuracy"]
    report.zero_division_flags = flags
    return report
