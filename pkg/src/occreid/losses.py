"""Supervision contract: cross-entropy identity loss and batch-hard triplet loss.

Both losses expose analytic gradients with respect to their input embeddings
so the loss math can be verified against finite differences. There is no
optimizer and no backprop through network weights here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InputError

__all__ = [
    "Classifier",
    "LossReport",
    "TotalLossReport",
    "id_loss",
    "triplet_loss",
    "stage_loss",
    "total_loss",
]

DEFAULT_MARGIN = 0.3


@dataclass
class Classifier:
    """Linear identity classifier: ``logits = x @ weight.T + bias``."""

    weight: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


@dataclass
class LossReport:
    """Loss values for one supervision stage; ``l_stage = l_id + l_triplet``."""

    l_id: float
    l_triplet: float
    grad_wrt_embeddings: np.ndarray

    @property
    def l_stage(self) -> float:
        return self.l_id + self.l_triplet


@dataclass
class TotalLossReport:
    sparse: LossReport
    consolidated: LossReport

    @property
    def total(self) -> float:
        return self.sparse.l_stage + self.consolidated.l_stage


def id_loss(
    batch_cls: np.ndarray, labels: np.ndarray, classifier: Classifier
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy plus its gradient w.r.t. the embeddings."""
    x = np.asarray(batch_cls, dtype=np.float64)
    labels = np.asarray(labels)
    n, _ = x.shape
    c = classifier.num_classes
    if labels.shape[0] != n:
        raise InputError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"labels must lie in [0, {c}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    w = np.asarray(classifier.weight, dtype=np.float64)
    b = np.asarray(classifier.bias, dtype=np.float64)

    logits = x @ w.T + b
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-np.log(probs[np.arange(n), labels]).mean())

    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    grad = delta @ w / n
    return loss, grad


def _pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    sq = (x**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    return np.sqrt(np.maximum(d2, 0.0))


def triplet_loss(
    batch_cls: np.ndarray, labels: np.ndarray, margin: float = DEFAULT_MARGIN
) -> tuple[float, np.ndarray]:
    """Batch-hard triplet loss on Euclidean distances, with its subgradient.

    Per anchor: hardest positive distance minus easiest negative distance
    plus margin, hinged at zero, averaged over the batch. Every anchor must
    have at least one positive and one negative. Where the hinge or a
    distance sits exactly at a kink the zero branch is taken.
    """
    x = np.asarray(batch_cls, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    dist = _pairwise_euclidean(x)
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        raise InputError("every anchor needs at least one positive in the batch")
    if not neg_mask.any(axis=1).all():
        raise InputError("every anchor needs at least one negative in the batch")

    grad = np.zeros_like(x)
    total = 0.0
    for a in range(n):
        pos_idx = np.flatnonzero(pos_mask[a])
        neg_idx = np.flatnonzero(neg_mask[a])
        p = pos_idx[np.argmax(dist[a, pos_idx])]
        q = neg_idx[np.argmin(dist[a, neg_idx])]
        violation = dist[a, p] - dist[a, q] + margin
        if violation <= 0.0:
            continue
        total += violation
        if dist[a, p] > 0.0:
            g = (x[a] - x[p]) / dist[a, p]
            grad[a] += g
            grad[p] -= g
        if dist[a, q] > 0.0:
            g = (x[a] - x[q]) / dist[a, q]
            grad[a] -= g
            grad[q] += g
    return total / n, grad / n


def stage_loss(
    batch_cls: np.ndarray,
    labels: np.ndarray,
    classifier: Classifier,
    margin: float = DEFAULT_MARGIN,
) -> LossReport:
    """Identity loss plus triplet loss for one supervision stage."""
    l_id, g_id = id_loss(batch_cls, labels, classifier)
    l_tri, g_tri = triplet_loss(batch_cls, labels, margin)
    return LossReport(l_id=l_id, l_triplet=l_tri, grad_wrt_embeddings=g_id + g_tri)


def total_loss(
    sparse_cls: np.ndarray,
    consolidated_cls: np.ndarray,
    labels: np.ndarray,
    classifier: Classifier,
    margin: float = DEFAULT_MARGIN,
) -> TotalLossReport:
    """Sum of the sparse-stage and consolidation-stage losses."""
    sparse_cls = np.asarray(sparse_cls)
    consolidated_cls = np.asarray(consolidated_cls)
    if sparse_cls.shape[0] != consolidated_cls.shape[0]:
        raise InputError(
            f"stage batches differ in size: {sparse_cls.shape[0]} vs "
            f"{consolidated_cls.shape[0]}"
        )
    return TotalLossReport(
        sparse=stage_loss(sparse_cls, labels, classifier, margin),
        consolidated=stage_loss(consolidated_cls, labels, classifier, margin),
    )
