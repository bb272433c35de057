"""Evaluation metrics: top-K precision, micro-F1, triple accuracy and
filtered ranking (MRR / MR / Hits@N).

All metrics are pure functions with documented, stable tie handling, so
results are invariant to input permutation except where ties force an
order (which then follows the original input order or the candidate index).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import NA_LABEL


class EvalError(Exception):
    pass


@dataclass
class PredictionSet:
    """Per-instance predicted id, ranking confidence and gold id."""

    predicted: np.ndarray
    confidence: np.ndarray
    gold: np.ndarray

    def __post_init__(self):
        self.predicted = np.asarray(self.predicted, dtype=np.int64)
        self.confidence = np.asarray(self.confidence, dtype=np.float64)
        self.gold = np.asarray(self.gold, dtype=np.int64)
        if not (len(self.predicted) == len(self.confidence) == len(self.gold)):
            raise EvalError("prediction columns must align")
        if not np.all(np.isfinite(self.confidence)):
            raise EvalError("confidences must be finite")

    def __len__(self):
        return len(self.predicted)


@dataclass
class RankingQuery:
    """One link-prediction query: candidate scores, gold index, filter mask.

    ``known_true`` flags candidates that are correct triples elsewhere in
    the dataset; the filtered setting removes them before ranking (the gold
    candidate itself is never removed).
    """

    scores: np.ndarray
    gold_index: int
    known_true: np.ndarray | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not 0 <= self.gold_index < len(self.scores):
            raise EvalError("gold candidate missing from the candidate list")
        if self.known_true is not None:
            self.known_true = np.asarray(self.known_true, dtype=bool)
            if self.known_true.shape != self.scores.shape:
                raise EvalError("filter mask must align with scores")


@dataclass
class RankingSet:
    queries: list[RankingQuery]
    filtered: bool = True


def precision_at_k(preds: PredictionSet, k: int) -> float:
    """Fraction correct among the k most confident non-NA predictions.

    Sorting is by confidence descending with ties kept in input order.
    """
    keep = preds.predicted != NA_LABEL
    pred = preds.predicted[keep]
    conf = preds.confidence[keep]
    gold = preds.gold[keep]
    if len(pred) < k:
        raise EvalError(f"only {len(pred)} non-NA predictions for top-{k}")
    order = np.argsort(-conf, kind="stable")[:k]
    return float(np.mean(pred[order] == gold[order]))


def pr_curve(preds: PredictionSet) -> list[tuple[float, float]]:
    """(recall, precision) points down the confidence-ranked predictions."""
    keep = preds.predicted != NA_LABEL
    pred = preds.predicted[keep]
    conf = preds.confidence[keep]
    gold = preds.gold[keep]
    total_gold = int(np.sum(preds.gold != NA_LABEL))
    order = np.argsort(-conf, kind="stable")
    correct = 0
    points = []
    for rank, idx in enumerate(order, start=1):
        correct += int(pred[idx] == gold[idx])
        recall = correct / total_gold if total_gold else 0.0
        points.append((recall, correct / rank))
    return points


def f1_micro(preds: PredictionSet, exclude_na: bool = True) -> float:
    """Micro-averaged F1; with ``exclude_na`` only non-NA classes count.

    A zero denominator on either side defines the score as 0.
    """
    if len(preds) == 0:
        raise EvalError("empty prediction set")
    classes = set(preds.gold.tolist()) | set(preds.predicted.tolist())
    if exclude_na:
        classes.discard(NA_LABEL)
    tp = fp = fn = 0
    for c in classes:
        pred_c = preds.predicted == c
        gold_c = preds.gold == c
        tp += int(np.sum(pred_c & gold_c))
        fp += int(np.sum(pred_c & ~gold_c))
        fn += int(np.sum(~pred_c & gold_c))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def triple_accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of binary decisions right at threshold 0.5 (>= is positive)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if set(np.unique(labels).tolist()) - {0, 1}:
        raise EvalError("triple labels must be binary")
    decisions = (scores >= 0.5).astype(np.int64)
    return float(np.mean(decisions == labels))


def mrr_mr_hits(rankings: RankingSet, ns: list[int]) -> dict:
    """Filtered MRR, MR and Hits@N over all queries.

    The gold rank is 1 + the number of surviving candidates with a strictly
    greater score (ties resolve in the gold's favor, deterministically).
    """
    if not rankings.queries:
        raise EvalError("empty ranking set")
    ranks = []
    for q in rankings.queries:
        keep = np.ones(len(q.scores), dtype=bool)
        if rankings.filtered and q.known_true is not None:
            keep = ~q.known_true
            keep[q.gold_index] = True
        gold_score = q.scores[q.gold_index]
        better = int(np.sum(q.scores[keep] > gold_score))
        ranks.append(1 + better)
    ranks = np.asarray(ranks, dtype=np.float64)
    out = {"MRR": float(np.mean(1.0 / ranks)), "MR": float(np.mean(ranks))}
    for n in ns:
        out[f"Hits@{n}"] = float(np.mean(ranks <= n))
    return out


# ---------------------------------------------------------------------------
# structured text emission


def metrics_lines(metrics: dict, group: str) -> list[str]:
    """metric,name,value rows; floats at full round-trip precision."""
    lines = []
    for name in sorted(metrics):
        value = metrics[name]
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{group},{name},{value}")
    return lines


def write_metrics(path, groups: dict) -> None:
    with open(path, "w") as fh:
        for group in sorted(groups):
            for line in metrics_lines(groups[group], group):
                fh.write(line + "\n")


def write_pr_curve(path, points: list[tuple[float, float]]) -> None:
    with open(path, "w") as fh:
        fh.write("recall,precision\n")
        for recall, precision in points:
            fh.write(f"{recall!r},{precision!r}\n")
