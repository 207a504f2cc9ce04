"""Gradient-free label-semantics math.

Everything here is a pure function of unit-norm label embeddings: cosine
similarity matrices within a task and across tasks, softened supervision
targets derived from the within-task matrix, and distillation target
distributions derived from the cross-task matrix.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .util import require_unit_rows, stable_softmax

# Probability floor for softened targets: far below any tolerance in use but
# nonzero, so log(target) never hits -inf.
_TINY = 1e-300


@dataclass(frozen=True)
class SoftLabelMatrix:
    """K x K softened supervision targets for one task.

    Entry (i, j) is exp(alpha * S[i, j]) normalized over j, so the slice for
    ground-truth class c is row c. All entries are strictly positive and each
    row sums to 1.
    """

    values: np.ndarray
    alpha: float
    class_order: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"soft labels must be square, got shape {v.shape}")
        # Strict positivity keeps KL against these targets finite; 1.0 can
        # only occur in the degenerate K=1 case.
        if v.size and (np.any(v <= 0.0) or np.any(v > 1.0)):
            raise ValueError("soft-label entries must lie in (0, 1]")
        if v.size and np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("soft-label rows must sum to 1")
        if self.class_order is not None and len(self.class_order) != v.shape[0]:
            raise ValueError("class_order length does not match matrix size")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def num_classes(self) -> int:
        return self.values.shape[0]

    def target_row(self, class_index: int) -> np.ndarray:
        return self.values[class_index]


@dataclass(frozen=True)
class DistillTargetMatrix:
    """K_new x M target distributions over old classes, one row per new class."""

    values: np.ndarray
    tau: float
    new_order: tuple[str, ...] | None = None
    old_order: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"distill targets must be 2-D, got shape {v.shape}")
        if v.size and np.max(np.abs(v.sum(axis=1) - 1.0)) > 1e-6:
            raise ValueError("distill-target rows must sum to 1")
        if self.new_order is not None and len(self.new_order) != v.shape[0]:
            raise ValueError("new_order length does not match row count")
        if self.old_order is not None and len(self.old_order) != v.shape[1]:
            raise ValueError("old_order length does not match column count")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def target_row(self, class_index: int) -> np.ndarray:
        return self.values[class_index]


def intra_similarity(embeddings: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity among one task's label embeddings.

    Rows must be unit norm; the result is symmetric with unit diagonal and
    entries clipped to [-1, 1] against float rounding.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] == 0:
        return np.empty((0, 0), dtype=np.float64)
    require_unit_rows(embeddings, tol=1e-4, name="label embeddings")
    sim = embeddings @ embeddings.T
    sim = np.clip(sim, -1.0, 1.0)
    # Dot products are symmetric up to BLAS rounding; make it exact.
    return (sim + sim.T) / 2.0


def soft_labels(
    similarity: np.ndarray,
    alpha: float,
    class_order: Sequence[str] | None = None,
) -> SoftLabelMatrix:
    """Softmax each similarity row at inverse-temperature ``alpha``.

    alpha -> 0 gives uniform targets, large alpha approaches one-hot. Values
    up to 1000 are safe thanks to max-subtraction.
    """
    similarity = np.asarray(similarity, dtype=np.float64)
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if similarity.ndim != 2 or similarity.shape[0] != similarity.shape[1]:
        raise ValueError(f"similarity must be square, got shape {similarity.shape}")
    if similarity.size and np.max(np.abs(similarity - similarity.T)) > 1e-6:
        raise ValueError("similarity must be symmetric")
    values = stable_softmax(alpha * similarity, axis=1)
    # Large alpha can underflow off-diagonal entries to exact zero; keep the
    # targets strictly positive so KL against them stays finite.
    values = np.maximum(values, _TINY)
    order = tuple(class_order) if class_order is not None else None
    return SoftLabelMatrix(values, float(alpha), order)


def one_hot_labels(
    num_classes: int,
    epsilon: float = 1e-8,
    class_order: Sequence[str] | None = None,
) -> SoftLabelMatrix:
    """Identity targets blended with ``epsilon`` uniform mass (keeps KL finite)."""
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    values = np.full((num_classes, num_classes), epsilon / num_classes, dtype=np.float64)
    np.fill_diagonal(values, 1.0 - epsilon + epsilon / num_classes)
    order = tuple(class_order) if class_order is not None else None
    return SoftLabelMatrix(values, alpha=0.0, class_order=order)


def inter_similarity(new_embeddings: np.ndarray, old_embeddings: np.ndarray) -> np.ndarray:
    """Cosine similarity between current-task and old-task label embeddings.

    Shape (K_new, M). M = 0 means "first task" and is the caller's case to
    handle (distillation is inactive there), so it is rejected here.
    """
    new_embeddings = np.asarray(new_embeddings, dtype=np.float64)
    old_embeddings = np.asarray(old_embeddings, dtype=np.float64)
    if old_embeddings.shape[0] < 1:
        raise ValueError("need at least one old class; skip distillation on the first task")
    require_unit_rows(new_embeddings, tol=1e-4, name="new-label embeddings")
    require_unit_rows(old_embeddings, tol=1e-4, name="old-label embeddings")
    return np.clip(new_embeddings @ old_embeddings.T, -1.0, 1.0)


def distill_targets(
    cross_similarity: np.ndarray,
    tau: float,
    new_order: Sequence[str] | None = None,
    old_order: Sequence[str] | None = None,
) -> DistillTargetMatrix:
    """Row-wise softmax of ``cross_similarity / tau`` over the old classes."""
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    cross_similarity = np.asarray(cross_similarity, dtype=np.float64)
    if cross_similarity.ndim != 2 or cross_similarity.shape[1] < 1:
        raise ValueError(f"cross similarity must be 2-D with M >= 1, got {cross_similarity.shape}")
    values = np.maximum(stable_softmax(cross_similarity / tau, axis=1), _TINY)
    return DistillTargetMatrix(
        values,
        float(tau),
        tuple(new_order) if new_order is not None else None,
        tuple(old_order) if old_order is not None else None,
    )
