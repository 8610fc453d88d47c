"""Representation-similarity (CKA) and correct-set diversity analysis."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Set

import numpy as np

from .data import Dataset
from .model import Model


def cka(x, y, center=True) -> float:
    """Linear centered kernel alignment between two feature matrices with
    the same rows (samples): ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F).

    Columns are mean-centered first (disable with ``center=False``); the
    result is clamped to [0, 1].
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"row mismatch: {x.shape[0]} vs {y.shape[0]}")
    if center:
        x = x - x.mean(axis=0, keepdims=True)
        y = y - y.mean(axis=0, keepdims=True)
    num = np.linalg.norm(y.T @ x, "fro") ** 2
    den = np.linalg.norm(x.T @ x, "fro") * np.linalg.norm(y.T @ y, "fro")
    if den == 0:
        raise ValueError("CKA undefined: zero feature matrix")
    return float(min(max(num / den, 0.0), 1.0))


def cka_matrix(feature_sets: Sequence[np.ndarray], center=True) -> np.ndarray:
    p = len(feature_sets)
    mat = np.eye(p)
    for i in range(p):
        for j in range(i + 1, p):
            mat[i, j] = mat[j, i] = cka(feature_sets[i], feature_sets[j],
                                        center=center)
    return mat


def mean_pairwise(mat: np.ndarray) -> float:
    p = len(mat)
    if p < 2:
        return float("nan")
    iu = np.triu_indices(p, 1)
    return float(mat[iu].mean())


@dataclass
class CorrectSet:
    """Test-sample indices a model classifies correctly."""

    model_id: int
    indices: Set[int]


def predictions(model: Model, dataset: Dataset, batch_size=256) -> np.ndarray:
    preds = np.empty(len(dataset), dtype=np.int64)
    for start in range(0, len(dataset), batch_size):
        x = dataset.samples[start:start + batch_size]
        logits = model.forward(x).logits
        preds[start:start + len(x)] = np.argmax(logits, axis=1)
    return preds


def correct_set(model, dataset: Dataset, model_id=0) -> CorrectSet:
    """Indices where argmax(logits) == label; works for a plain Model or a
    CompositeModel (routed prediction)."""
    if isinstance(model, Model):
        preds = predictions(model, dataset)
    else:
        from .builder import predict

        _, preds = predict(model, dataset.samples)
    idx = np.flatnonzero(preds == dataset.labels)
    return CorrectSet(model_id=model_id, indices=set(int(i) for i in idx))


def union_accuracy(sets: Sequence[CorrectSet], n: int) -> float:
    if n <= 0:
        raise ValueError("test size must be positive")
    union = set()
    for s in sets:
        union |= s.indices
    return len(union) / n


def overlap_report(sets: Sequence[CorrectSet]) -> dict:
    """Pairwise intersection and Jaccard matrices plus, per model, the count
    of samples only it gets right, and the count every model gets right."""
    if len(sets) < 2:
        raise ValueError("overlap report requires at least 2 sets")
    p = len(sets)
    inter = np.zeros((p, p), dtype=np.int64)
    jaccard = np.zeros((p, p))
    for i in range(p):
        inter[i, i] = len(sets[i].indices)
        jaccard[i, i] = 1.0 if sets[i].indices else 0.0
        for j in range(i + 1, p):
            a, b = sets[i].indices, sets[j].indices
            inter[i, j] = inter[j, i] = len(a & b)
            u = len(a | b)
            jaccard[i, j] = jaccard[j, i] = (len(a & b) / u) if u else 0.0
    exclusive = []
    for i in range(p):
        others = set()
        for j in range(p):
            if j != i:
                others |= sets[j].indices
        exclusive.append(len(sets[i].indices - others))
    common = set(sets[0].indices)
    for s in sets[1:]:
        common &= s.indices
    return {
        "intersection": inter,
        "jaccard": jaccard,
        "exclusive_counts": exclusive,
        "all_correct_count": len(common),
    }
