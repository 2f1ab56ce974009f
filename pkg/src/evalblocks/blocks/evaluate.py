"""Quantitative evaluation: kNN scoring, linear probe, shared metrics.

Both evaluators reduce a test embedding to a positive-class score in
[0, 1], so one number feeds accuracy (threshold 0.5, ties predicted
positive) and AUC alike. A single-class metric is undefined and surfaces
as NaN; it serializes as JSON null and is excluded from fold aggregation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..errors import BlockExecutionError, DataError

log = logging.getLogger(__name__)


def knn_scores(
    train_vectors: np.ndarray,
    train_labels: np.ndarray,
    test_vectors: np.ndarray,
    k: int,
    metric: str = "euclidean",
) -> np.ndarray:
    """Positive-neighbor fraction among the k nearest training vectors.

    Distance ties break toward the lower training index (stable argsort).
    k larger than the training set is clamped with a warning.
    """
    train_vectors = np.asarray(train_vectors, dtype=np.float64)
    test_vectors = np.asarray(test_vectors, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    if train_vectors.ndim != 2 or test_vectors.ndim != 2:
        raise DataError("knn expects rank-2 vector matrices")
    if train_vectors.shape[1] != test_vectors.shape[1]:
        raise DataError(
            f"dimension mismatch: train D={train_vectors.shape[1]}, "
            f"test D={test_vectors.shape[1]}"
        )
    n_train = train_vectors.shape[0]
    if n_train == 0:
        raise DataError("empty training set")
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if k > n_train:
        log.warning("k=%d exceeds n_train=%d; clamping", k, n_train)
        k = n_train

    if metric == "euclidean":
        # squared distances sorted identically to euclidean distances
        diffs = test_vectors[:, None, :] - train_vectors[None, :, :]
        dists = np.einsum("ijk,ijk->ij", diffs, diffs)
    elif metric == "cosine":
        tn = train_vectors / np.maximum(np.linalg.norm(train_vectors, axis=1, keepdims=True), 1e-30)
        qn = test_vectors / np.maximum(np.linalg.norm(test_vectors, axis=1, keepdims=True), 1e-30)
        dists = 1.0 - qn @ tn.T
    else:
        raise DataError(f"unknown distance metric {metric!r}")

    order = np.argsort(dists, axis=1, kind="stable")[:, :k]
    return (train_labels[order] == 1).mean(axis=1)


def knn_score(
    train_vectors: np.ndarray,
    train_labels: np.ndarray,
    test_vector: np.ndarray,
    k: int,
    metric: str = "euclidean",
) -> float:
    """Single-query convenience wrapper around knn_scores."""
    return float(
        knn_scores(train_vectors, train_labels, np.asarray(test_vector)[None, :], k, metric)[0]
    )


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction where (score >= threshold) agrees with (label == 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise DataError("empty score list")
    return float(((scores >= threshold) == (labels == 1)).mean())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1; ties share the mean of their rank range."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) formulation.

    Equals the fraction of (positive, negative) pairs where the positive
    scores higher, tied pairs counting half. NaN when only one class is
    present: undefined, never fabricated.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise DataError(f"length mismatch: {scores.shape} vs {labels.shape}")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class LinearModel:
    """Single linear layer: weights (n_classes x D), bias (n_classes)."""

    weights: np.ndarray
    bias: np.ndarray
    loss_trace: list[float]


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def probe_loss_and_grad(
    weights: np.ndarray, bias: np.ndarray, X: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy and its full-batch analytic gradient."""
    n = X.shape[0]
    probs = _softmax(X @ weights.T + bias)
    loss = float(-np.log(np.maximum(probs[np.arange(n), labels], 1e-300)).mean())
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return loss, delta.T @ X, delta.sum(axis=0)


def train_linear_probe(
    train_vectors: np.ndarray,
    train_labels: np.ndarray,
    lr: float = 1e-5,
    epochs: int = 100,
    seed: int = 0,
) -> LinearModel:
    """Full-batch gradient descent on mean cross-entropy, f64, zero init.

    The trace records the loss at the start of each epoch, so trace[0] is
    the uniform-softmax loss ln(n_classes). Deterministic for given
    inputs; the seed is reserved for future stochastic variants.
    """
    del seed  # zero init and full batches: nothing stochastic to seed
    X = np.asarray(train_vectors, dtype=np.float64)
    labels = np.asarray(train_labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != labels.shape[0]:
        raise DataError("train_linear_probe expects (n x D) vectors and n labels")
    if labels.min() < 0 or labels.max() > 1:
        raise DataError("labels must be 0 or 1")
    if lr <= 0 or epochs < 1:
        raise DataError("lr must be > 0 and epochs >= 1")

    n_classes = 2
    W = np.zeros((n_classes, X.shape[1]), dtype=np.float64)
    b = np.zeros(n_classes, dtype=np.float64)
    trace: list[float] = []
    for _ in range(epochs):
        loss, gW, gb = probe_loss_and_grad(W, b, X, labels)
        if not math.isfinite(loss):
            raise BlockExecutionError(f"non-finite probe loss after {len(trace)} epochs")
        trace.append(loss)
        W -= lr * gW
        b -= lr * gb
    return LinearModel(weights=W, bias=b, loss_trace=trace)


def probe_predict(model: LinearModel, vectors: np.ndarray) -> np.ndarray:
    """Class-probability rows via numerically stable softmax."""
    X = np.asarray(vectors, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.shape[1] != model.weights.shape[1]:
        raise DataError(
            f"dimension mismatch: model D={model.weights.shape[1]}, input D={X.shape[1]}"
        )
    probs = _softmax(X @ model.weights.T + model.bias)
    return probs[0] if single else probs


def aggregate_folds(values: list[float]) -> tuple[float, float | None]:
    """Mean and sample standard deviation (n-1 divisor) across folds.

    With fewer than two defined values the std is undefined (None); the
    mean is still reported.
    """
    defined = [v for v in values if v is not None and math.isfinite(v)]
    if not defined:
        raise DataError("no defined values to aggregate")
    mean = float(np.mean(defined))
    if len(defined) < 2:
        return mean, None
    return mean, float(np.std(defined, ddof=1))
