"""Evaluation metrics: accuracy, ROC AUC, communication cost, weight distance,
and linear-kernel representation similarity (HSIC / CKA)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ShapeError, UndefinedMetricError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise InputError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def accuracy(counts: ConfusionCounts) -> float:
    """True-prediction ratio (tp + tn) / total."""
    if counts.total == 0:
        raise InputError("cannot compute accuracy over zero samples")
    return (counts.tp + counts.tn) / counts.total


def accuracy_score(predictions, labels) -> float:
    """Multiclass accuracy: fraction of exact label matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"shape mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise InputError("cannot compute accuracy over zero samples")
    return float(np.mean(predictions == labels))


def auc(scores, labels) -> float:
    """Area under the ROC curve, trapezoidal over distinct score thresholds.

    Tied scores are grouped at a single threshold, so the trapezoid across a
    tie block credits half, matching the pairwise probability
    P(score+ > score-) + 0.5 * P(tie).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputError("scores and labels must be equal-length 1-D sequences")
    pos = int(np.sum(labels == 1))
    neg = int(np.sum(labels == 0))
    if pos + neg != len(labels):
        raise InputError("labels must be 0 or 1")
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order].astype(np.float64)
    distinct = np.flatnonzero(np.diff(s))
    cut = np.concatenate([distinct, [len(s) - 1]])
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    tpr = np.concatenate([[0.0], tps / pos])
    fpr = np.concatenate([[0.0], fps / neg])
    return float(np.trapezoid(tpr, fpr))


@dataclass
class CommLedger:
    """Per-round transmitted trainable-parameter counts.

    ``params_per_round[t]`` is the one-way per-client count for round t; the
    protocol sends each parameter down and back up for every client, hence
    the 2 * S factor in the cost.
    """

    num_clients: int
    bytes_per_param: int = 4
    params_per_round: list = field(default_factory=list)

    def add_round(self, param_count: int) -> None:
        if param_count < 0:
            raise InputError("parameter count must be nonnegative")
        self.params_per_round.append(int(param_count))

    def cumulative_transmitted(self) -> list:
        """Running totals of 2 * S * sum(params) after each round."""
        out, total = [], 0
        for p in self.params_per_round:
            total += 2 * self.num_clients * p
            out.append(total)
        return out


def communication_cost(ledger: CommLedger, through_round: int | None = None):
    """Total transmitted parameters and megabytes.

    ``through_round`` counts rounds 1..k (1-based, typically the round with
    the best validation metric); None counts every recorded round.
    """
    rounds = ledger.params_per_round
    if through_round is not None:
        if through_round < 0 or through_round > len(rounds):
            raise InputError(f"through_round {through_round} out of range")
        rounds = rounds[:through_round]
    count = 2 * ledger.num_clients * int(np.sum(rounds, dtype=np.int64)) if rounds else 0
    megabytes = count * ledger.bytes_per_param / 2**20
    return count, megabytes


def weight_distance(a, b) -> float:
    """Frobenius norm of the difference, concatenated over layers."""
    a_list = a if isinstance(a, (list, tuple)) else [a]
    b_list = b if isinstance(b, (list, tuple)) else [b]
    if len(a_list) != len(b_list):
        raise ShapeError(f"layer count mismatch: {len(a_list)} vs {len(b_list)}")
    total = 0.0
    for x, y in zip(a_list, b_list):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ShapeError(f"layer shape mismatch: {x.shape} vs {y.shape}")
        total += float(np.sum((x - y) ** 2))
    return float(np.sqrt(total))


def linear_hsic(z1, z2) -> float:
    """Linear-kernel HSIC via the feature-space form |Z1c^T Z2c|_F^2 / (n-1)^2."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.ndim != 2 or z2.ndim != 2:
        raise InputError("representations must be 2-D (samples x features)")
    n = z1.shape[0]
    if z2.shape[0] != n:
        raise InputError(f"sample counts differ: {n} vs {z2.shape[0]}")
    if n < 2:
        raise InputError("HSIC needs at least 2 samples")
    c1 = z1 - z1.mean(axis=0)
    c2 = z2 - z2.mean(axis=0)
    return float(np.sum((c1.T @ c2) ** 2) / (n - 1) ** 2)


def cka(z1, z2) -> float:
    """Linear CKA in [0, 1]; invariant to orthogonal maps and positive scaling."""
    h12 = linear_hsic(z1, z2)
    h11 = linear_hsic(z1, z1)
    h22 = linear_hsic(z2, z2)
    if h11 <= 0 or h22 <= 0:
        raise UndefinedMetricError("CKA is undefined for constant representations")
    # sqrt(h11 * h22) keeps the self-comparison exactly 1.0
    return min(float(h12 / np.sqrt(h11 * h22)), 1.0)


def layer_averaged_cka(reps_a, reps_b) -> float:
    """Arithmetic mean of per-layer CKA over matched layer representations."""
    if len(reps_a) != len(reps_b):
        raise InputError(f"layer count mismatch: {len(reps_a)} vs {len(reps_b)}")
    if not reps_a:
        raise InputError("need at least one layer")
    return float(np.mean([cka(a, b) for a, b in zip(reps_a, reps_b)]))
