"""Continual-learning metrics over accuracy matrices and per-sample scores.

The accuracy matrix holds entry (i, j) = accuracy on task j after training
through task i. Backward transfer and forgetting summarize its columns;
one-vs-rest AUC, plain accuracy, and task-masked accuracy score a single
evaluation. Everything here is a pure function of its inputs.
"""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger("conslide.metrics")


class AccuracyMatrix:
    """Square matrix of per-task accuracies, one row per completed stage."""

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got shape {arr.shape}")
        if np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("accuracy matrix entries must lie in [0, 1]")
        self.values = arr

    @property
    def num_tasks(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, idx):
        return self.values[idx]

    def to_csv(self) -> str:
        t = self.num_tasks
        lines = ["after_task," + ",".join(f"task_{j}" for j in range(t))]
        for i in range(t):
            lines.append(str(i) + "," + ",".join(repr(float(v)) for v in self.values[i]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AccuracyMatrix":
        rows = []
        for line in text.strip().splitlines()[1:]:
            rows.append([float(x) for x in line.split(",")[1:]])
        return cls(rows)


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty sample set is undefined")
    return float(np.mean(predictions == labels))


def masked_accuracy(probabilities, labels, task_ids, class_map) -> float:
    """Accuracy with each sample's argmax restricted to its own task's classes."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    task_ids = np.asarray(task_ids)
    if probabilities.ndim != 2 or len(labels) != len(probabilities) or len(task_ids) != len(labels):
        raise ValueError("probabilities, labels and task ids must align")
    if len(labels) == 0:
        raise ValueError("masked accuracy of an empty sample set is undefined")
    correct = 0
    for probs, label, task in zip(probabilities, labels, task_ids):
        classes = class_map[int(task)]
        if int(label) not in classes:
            raise ValueError(f"label {label} is not among task {task} classes {classes}")
        pick = classes[int(np.argmax(probs[classes]))]
        correct += pick == int(label)
    return correct / len(labels)


def _ranks_with_ties(scores: np.ndarray) -> np.ndarray:
    """1-based fractional ranks; tied values share the mean of their ranks."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-statistic AUC with half credit for ties."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    ranks = _ranks_with_ties(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def auc_ovr(probabilities, labels):
    """Macro-averaged one-vs-rest AUC.

    Classes without both a positive and a negative example are skipped with
    a warning and excluded from the average. Returns (macro_auc, per_class)
    where per_class maps class index to its AUC or None when skipped.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probabilities.ndim != 2 or len(labels) != len(probabilities):
        raise ValueError("probabilities must be [n, classes] aligned with labels")
    num_classes = probabilities.shape[1]
    per_class = {}
    scored = []
    for c in range(num_classes):
        positive = labels == c
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == len(labels):
            per_class[c] = None
            log.warning("auc_ovr: class %d has no positive/negative split, skipped", c)
            continue
        value = _binary_auc(probabilities[:, c], positive)
        per_class[c] = value
        scored.append(value)
    if not scored:
        raise ValueError("auc_ovr: no class has both positives and negatives")
    total = 0.0
    for value in scored:
        total += value
    return total / len(scored), per_class


def bwt(matrix: AccuracyMatrix):
    """Mean accuracy change on past tasks after the final stage.

    None when fewer than two tasks exist (the metric is undefined).
    """
    t = matrix.num_tasks
    if t < 2:
        return None
    total = 0.0
    for i in range(t - 1):
        total += matrix.values[t - 1, i] - matrix.values[i, i]
    return total / (t - 1)


def forgetting(matrix: AccuracyMatrix, literal_penultimate_row: bool = False):
    """Mean gap between each past task's best historical accuracy and its
    accuracy at the reference row.

    The reference row is the final row. ``literal_penultimate_row`` switches
    to row T-2 for comparison with the alternative indexing under which the
    last task's training never counts; it is off by default.

    None when fewer than two tasks exist.
    """
    t = matrix.num_tasks
    if t < 2:
        return None
    ref = t - 2 if literal_penultimate_row else t - 1
    total = 0.0
    for i in range(t - 1):
        best = matrix.values[: t - 1, i].max()
        total += best - matrix.values[ref, i]
    return total / (t - 1)
