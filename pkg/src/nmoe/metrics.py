"""Classification metrics: accuracy, macro-F1, one-vs-rest macro-AUC.

Reports carry three views of every metric: per client, pooled over all
samples, and the unweighted mean of per-client values. The distinction
matters: a set of clients that each always predict their own dominant
class looks healthy when samples are pooled (every class is somebody's
dominant), while the per-client macro-F1 collapses toward 1/C. Both
views are emitted so either failure mode is visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def _check_pair(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions)
    y = np.asarray(labels)
    if p.ndim != 1 or y.ndim != 1 or p.shape != y.shape:
        raise DataError(
            f"predictions {p.shape} and labels {y.shape} do not line up")
    if p.size == 0:
        raise DataError("metrics over an empty sample set")
    return p.astype(np.int64), y.astype(np.int64)


def accuracy(predictions, labels) -> float:
    p, y = _check_pair(predictions, labels)
    return float(np.mean(p == y))


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Counts with true classes as rows and predictions as columns."""
    p, y = _check_pair(predictions, labels)
    if num_classes < 1:
        raise DataError(f"num_classes must be positive: {num_classes}")
    if p.min() < 0 or p.max() >= num_classes or \
            y.min() < 0 or y.max() >= num_classes:
        raise DataError(f"labels or predictions outside [0, {num_classes})")
    flat = y * num_classes + p
    return np.bincount(flat, minlength=num_classes * num_classes) \
        .reshape(num_classes, num_classes)


def macro_f1(predictions, labels, num_classes: int) -> float:
    """Unweighted mean over all classes of 2PR/(P+R), zero when a class
    has no predictions or no instances."""
    conf = confusion_matrix(predictions, labels, num_classes)
    tp = np.diag(conf).astype(np.float64)
    predicted = conf.sum(axis=0).astype(np.float64)
    actual = conf.sum(axis=1).astype(np.float64)
    scores = np.zeros(num_classes)
    for c in range(num_classes):
        precision = tp[c] / predicted[c] if predicted[c] > 0 else 0.0
        recall = tp[c] / actual[c] if actual[c] > 0 else 0.0
        if precision + recall > 0:
            scores[c] = 2.0 * precision * recall / (precision + recall)
    return float(scores.mean())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """One-based ranks with ties sharing their group's average rank."""
    n = values.size
    order = np.argsort(values, kind="stable")
    ordered = values[order]
    new_group = np.empty(n, dtype=bool)
    new_group[0] = True
    new_group[1:] = ordered[1:] != ordered[:-1]
    group = np.cumsum(new_group) - 1
    counts = np.bincount(group)
    starts = np.cumsum(counts) - counts
    # ranks within a tie group average to start + (size - 1) / 2, one-based
    group_rank = starts + (counts - 1) / 2.0 + 1.0
    ranks = np.empty(n)
    ranks[order] = group_rank[group]
    return ranks


def binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    """Rank-statistic AUC, exactly the mean over positive-negative pairs
    of win=1 / tie=0.5 / loss=0."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    p = int(pos.sum())
    n = int(s.size - p)
    if p == 0 or n == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(s)
    numerator = ranks[pos].sum() - p * (p + 1) / 2.0
    return float(numerator / (p * n))


def macro_auc_detail(scores, labels) -> tuple[float, tuple[int, ...]]:
    """One-vs-rest AUC averaged over eligible classes.

    A class is eligible when the sample set contains at least one
    positive and one negative for it; the rest are returned as skipped.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.ndim != 2 or y.ndim != 1 or s.shape[0] != y.shape[0]:
        raise DataError(
            f"scores {s.shape} and labels {y.shape} do not line up")
    if s.shape[0] == 0:
        raise DataError("metrics over an empty sample set")
    num_classes = s.shape[1]
    if y.min() < 0 or y.max() >= num_classes:
        raise DataError(f"labels outside [0, {num_classes})")
    values = []
    skipped = []
    for c in range(num_classes):
        pos = y == c
        if pos.any() and not pos.all():
            values.append(binary_auc(s[:, c], pos))
        else:
            skipped.append(c)
    if not values:
        raise DataError("no class has both positives and negatives")
    return float(np.mean(values)), tuple(skipped)


def macro_auc(scores, labels) -> float:
    return macro_auc_detail(scores, labels)[0]


@dataclass(frozen=True)
class ClientMetrics:
    client_id: int
    num_samples: int
    accuracy: float
    macro_f1: float
    macro_auc: float | None  # None when no class is AUC-eligible


@dataclass(frozen=True)
class EvalReport:
    """Per-client, sample-pooled, and client-mean metrics plus the pooled
    confusion matrix (rows are true classes)."""

    per_client: tuple[ClientMetrics, ...]
    pooled_accuracy: float
    pooled_macro_f1: float
    pooled_macro_auc: float | None
    client_mean_accuracy: float
    client_mean_macro_f1: float
    client_mean_macro_auc: float | None
    confusion: np.ndarray
    skipped_auc_classes: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "per_client": [
                {
                    "client_id": c.client_id,
                    "num_samples": c.num_samples,
                    "accuracy": c.accuracy,
                    "macro_f1": c.macro_f1,
                    "macro_auc": c.macro_auc,
                }
                for c in self.per_client
            ],
            "pooled": {
                "accuracy": self.pooled_accuracy,
                "macro_f1": self.pooled_macro_f1,
                "macro_auc": self.pooled_macro_auc,
            },
            "client_mean": {
                "accuracy": self.client_mean_accuracy,
                "macro_f1": self.client_mean_macro_f1,
                "macro_auc": self.client_mean_macro_auc,
            },
            "confusion": self.confusion.tolist(),
            "skipped_auc_classes": list(self.skipped_auc_classes),
        }


def evaluate_clients(predictions: dict, scores: dict, labels: dict,
                     num_classes: int) -> EvalReport:
    """Build the full report from per-client predictions, score matrices,
    and true labels, keyed by client id."""
    ids = sorted(predictions)
    if not ids or sorted(scores) != ids or sorted(labels) != ids:
        raise DataError("predictions, scores, and labels must share one "
                        "nonempty set of client ids")
    per_client = []
    for cid in ids:
        try:
            auc = macro_auc(scores[cid], labels[cid])
        except DataError:
            auc = None
        per_client.append(ClientMetrics(
            client_id=cid,
            num_samples=int(np.asarray(labels[cid]).size),
            accuracy=accuracy(predictions[cid], labels[cid]),
            macro_f1=macro_f1(predictions[cid], labels[cid], num_classes),
            macro_auc=auc))
    pooled_p = np.concatenate([np.asarray(predictions[c]) for c in ids])
    pooled_s = np.concatenate([np.asarray(scores[c]) for c in ids])
    pooled_y = np.concatenate([np.asarray(labels[c]) for c in ids])
    try:
        pooled_auc, skipped = macro_auc_detail(pooled_s, pooled_y)
    except DataError:
        pooled_auc, skipped = None, tuple(range(num_classes))
    client_aucs = [c.macro_auc for c in per_client
                   if c.macro_auc is not None]
    return EvalReport(
        per_client=tuple(per_client),
        pooled_accuracy=accuracy(pooled_p, pooled_y),
        pooled_macro_f1=macro_f1(pooled_p, pooled_y, num_classes),
        pooled_macro_auc=pooled_auc,
        client_mean_accuracy=float(np.mean([c.accuracy
                                            for c in per_client])),
        client_mean_macro_f1=float(np.mean([c.macro_f1
                                            for c in per_client])),
        client_mean_macro_auc=float(np.mean(client_aucs))
        if client_aucs else None,
        confusion=confusion_matrix(pooled_p, pooled_y, num_classes),
        skipped_auc_classes=skipped)
