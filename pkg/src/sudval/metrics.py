"""Scoring mathematics.

Token-overlap strict/relaxed precision/recall/F1, macro averaging, percent
agreement, Gwet's AC1 (with Cohen's kappa for contrast), and rank-based
ROC/AUC. All functions are pure and deterministic.
"""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass

from .errors import UndefinedMetricError

TokenBag = Counter


def normalize_tokens(text: str) -> Counter:
    """Tokenize into a multiset: NFC-normalize, lowercase, punctuation -> space.

    Every character that is neither alphanumeric nor whitespace counts as
    punctuation. The same tokenizer backs relaxed matching and TF-IDF so the
    metric and the feature space cannot drift apart.
    """
    normalized = unicodedata.normalize("NFC", text).lower()
    cleaned = "".join(c if c.isalnum() or c.isspace() else " " for c in normalized)
    return Counter(cleaned.split())


@dataclass
class MatchScore:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def _safe_ratio(numerator: int, denominator: int, other_count: int) -> float:
    # Zero-denominator convention: empty-vs-empty is a perfect match (1.0);
    # a zero denominator against any remaining mass scores 0.0.
    if denominator > 0:
        return numerator / denominator
    return 1.0 if other_count == 0 else 0.0


def relaxed_score(gold: str, generated: str) -> MatchScore:
    """Token-multiset overlap score.

    tp = overlapping tokens, fn = gold-only tokens, fp = generated-only tokens.
    Swapping arguments swaps precision and recall; f1 is unchanged.
    """
    gold_bag = normalize_tokens(gold)
    generated_bag = normalize_tokens(generated)
    overlap = gold_bag & generated_bag
    tp = sum(overlap.values())
    fn = sum((gold_bag - generated_bag).values())
    fp = sum((generated_bag - gold_bag).values())
    precision = _safe_ratio(tp, tp + fp, fn)
    recall = _safe_ratio(tp, tp + fn, fp)
    f1 = (
        2 * precision * recall / (precision + recall)
        if precision + recall > 0
        else 0.0
    )
    return MatchScore(precision=precision, recall=recall, f1=f1, tp=tp, fp=fp, fn=fn)


def strict_score(gold: str, generated: str, case_sensitive: bool = False) -> int:
    """1 iff the strings are equal after NFC normalization and trim.

    Case-insensitive by default; set case_sensitive=True to preserve the
    character-level reading exactly.
    """
    a = unicodedata.normalize("NFC", gold).strip()
    b = unicodedata.normalize("NFC", generated).strip()
    if not case_sensitive:
        a = a.lower()
        b = b.lower()
    return 1 if a == b else 0


def macro_average(scores: list[MatchScore]) -> MatchScore:
    """Arithmetic mean of per-instance precision/recall/f1 (not pooled counts).

    The returned tp/fp/fn are summed for reference; the per-instance f1
    identity does not hold for the aggregate.
    """
    if not scores:
        raise UndefinedMetricError("macro average of an empty collection")
    n = len(scores)
    return MatchScore(
        precision=sum(s.precision for s in scores) / n,
        recall=sum(s.recall for s in scores) / n,
        f1=sum(s.f1 for s in scores) / n,
        tp=sum(s.tp for s in scores),
        fp=sum(s.fp for s in scores),
        fn=sum(s.fn for s in scores),
    )


@dataclass(frozen=True)
class AgreementTable:
    """2x2 rater-agreement counts: n11 both correct, n00 both incorrect."""

    n11: int
    n10: int
    n01: int
    n00: int

    @property
    def n(self) -> int:
        return self.n11 + self.n10 + self.n01 + self.n00

    def _check(self) -> None:
        if min(self.n11, self.n10, self.n01, self.n00) < 0:
            raise UndefinedMetricError("negative agreement counts")
        if self.n == 0:
            raise UndefinedMetricError("empty agreement table")


def percent_agreement(table: AgreementTable) -> float:
    table._check()
    return (table.n11 + table.n00) / table.n


def gwet_ac1(table: AgreementTable) -> float:
    """Chance-corrected agreement robust to prevalence skew.

    po = observed agreement; pi = mean marginal probability of "correct";
    pe = 2*pi*(1-pi); AC1 = (po - pe) / (1 - pe).
    """
    table._check()
    n = table.n
    po = (table.n11 + table.n00) / n
    pi = ((table.n11 + table.n10) / n + (table.n11 + table.n01) / n) / 2
    pe = 2 * pi * (1 - pi)
    if pe == 1:
        # Unreachable for AC1 (pe <= 0.5); guard kept for contract parity.
        raise UndefinedMetricError("AC1 undefined: chance agreement is 1")
    return (po - pe) / (1 - pe)


def cohen_kappa(table: AgreementTable) -> float:
    """Cohen's kappa on the same 2x2 table, for contrast with AC1 under skew."""
    table._check()
    n = table.n
    po = (table.n11 + table.n00) / n
    a_correct = (table.n11 + table.n10) / n
    b_correct = (table.n11 + table.n01) / n
    pe = a_correct * b_correct + (1 - a_correct) * (1 - b_correct)
    if pe == 1:
        raise UndefinedMetricError("kappa undefined: chance agreement is 1")
    return (po - pe) / (1 - pe)


@dataclass
class RocCurve:
    """ROC points from a descending-score threshold sweep, plus the AUC.

    Points start at (0, 0) and end at (1, 1); equal scores are grouped into
    one threshold step (Mann-Whitney tie convention).
    """

    points: list[tuple[float, float]]
    auc: float


def roc_auc(scores: list[float], labels: list[bool]) -> RocCurve:
    """Rank-based AUC: (concordant pairs + 0.5 * tied pairs) / (pos * neg).

    Computed via positive-label midranks, which equals the pairwise
    definition exactly. Constant scores with mixed labels give 0.5
    (the all-ties convention).
    """
    if len(scores) != len(labels):
        raise UndefinedMetricError("scores and labels differ in length")
    n_pos = sum(1 for label in labels if label)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined for single-class labels")

    # Midranks over ascending scores; ties share the mean rank of their run.
    order = sorted(range(len(scores)), key=lambda i: scores[i])
    rank_sum_pos = 0.0
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        midrank = (i + 1 + j + 1) / 2
        for k in range(i, j + 1):
            if labels[order[k]]:
                rank_sum_pos += midrank
        i = j + 1
    auc = (rank_sum_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)

    points: list[tuple[float, float]] = [(0.0, 0.0)]
    tp = fp = 0
    i = len(order) - 1
    while i >= 0:
        j = i
        while j - 1 >= 0 and scores[order[j - 1]] == scores[order[i]]:
            j -= 1
        for k in range(j, i + 1):
            if labels[order[k]]:
                tp += 1
            else:
                fp += 1
        points.append((fp / n_neg, tp / n_pos))
        i = j - 1
    return RocCurve(points=points, auc=auc)
