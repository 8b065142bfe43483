"""Hybrid matching: image-level cosine distance plus patch-level EMD.

The patch-level distance is an earth mover's distance between two weighted
patch sets. Ground costs are pairwise cosine distances; each patch's mass is
its clamped correlation with the other set's mean embedding. The balanced
transport problem (both weight vectors normalized to unit mass) is solved by
Sinkhorn scaling in 64-bit. Ranking is two-stage: a cosine shortlist, then
the combined distance over the shortlist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncodedFeature
from .exceptions import (
    ConfigurationError,
    DegenerateInputError,
    DegenerateTransportError,
    InputError,
    ShapeError,
)
from .gallery import GalleryMemory

__all__ = [
    "TransportProblem",
    "TransportPlan",
    "RankedCandidate",
    "RankList",
    "cosine_distance",
    "pairwise_cosine_distances",
    "correlation_weights",
    "sinkhorn_solve",
    "emd_distance",
    "combined_distance",
    "rank",
]

DEFAULT_ALPHA = 0.4
DEFAULT_SHORTLIST = 100
DEFAULT_EPS = 0.05
DEFAULT_MAX_ITERS = 1000
DEFAULT_TOL = 1e-4
DEGENERATE_EMD = 1.0  # neutral mid-range cosine-distance value


@dataclass
class TransportProblem:
    """Ground costs (m x n) and nonnegative weight vectors for each side."""

    cost: np.ndarray
    w_q: np.ndarray
    w_g: np.ndarray


@dataclass
class TransportPlan:
    flow: np.ndarray
    cost_value: float
    iterations_used: int
    converged: bool


@dataclass
class RankedCandidate:
    position: int
    d_cos: float
    d_emd: float
    d_combined: float


@dataclass
class RankList:
    """Top-k gallery candidates for one query, ascending by combined distance."""

    query: EncodedFeature
    candidates: list[RankedCandidate]
    shortlist_size: int
    k: int


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]. Zero vectors are rejected."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"cosine_distance length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine_distance is undefined for zero vectors")
    return float(1.0 - np.dot(a, b) / (na * nb))


def pairwise_cosine_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs cosine distances between row sets; zero rows map to 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    an = a / np.where(na > 0.0, na, 1.0)
    bn = b / np.where(nb > 0.0, nb, 1.0)
    return 1.0 - an @ bn.T


def correlation_weights(
    q_patches: np.ndarray, g_patches: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Clamped correlation of each patch with the other set's mean embedding."""
    q = np.asarray(q_patches, dtype=np.float64)
    g = np.asarray(g_patches, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ShapeError(f"patch dimensions differ: {q.shape[1]} vs {g.shape[1]}")
    w_q = np.maximum(0.0, q @ g.mean(axis=0))
    w_g = np.maximum(0.0, g @ q.mean(axis=0))
    return w_q, w_g


def sinkhorn_solve(
    p: TransportProblem,
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> TransportPlan:
    """Entropy-regularized balanced transport via alternating scaling.

    Both weight vectors are normalized to unit total mass first. Iteration
    stops when the worst marginal violation falls below ``tol``. The reported
    cost is flow-weighted ground cost divided by total flow, which keeps it
    commensurate with cosine distances.
    """
    cost = np.asarray(p.cost, dtype=np.float64)
    w_q = np.asarray(p.w_q, dtype=np.float64)
    w_g = np.asarray(p.w_g, dtype=np.float64)
    if cost.shape != (w_q.shape[0], w_g.shape[0]):
        raise ShapeError(
            f"cost shape {cost.shape} does not match weights {w_q.shape[0]}x{w_g.shape[0]}"
        )
    tq, tg = w_q.sum(), w_g.sum()
    if tq <= 0.0 or tg <= 0.0:
        raise DegenerateTransportError("transport weights have zero total mass")
    w_q = w_q / tq
    w_g = w_g / tg

    kernel = np.exp(-cost / eps)
    v = np.ones_like(w_g)
    u = np.ones_like(w_q)
    converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        u = w_q / (kernel @ v)
        v = w_g / (kernel.T @ u)
        flow = u[:, None] * kernel * v[None, :]
        violation = max(
            np.abs(flow.sum(axis=1) - w_q).max(),
            np.abs(flow.sum(axis=0) - w_g).max(),
        )
        if violation < tol:
            converged = True
            break
    flow = u[:, None] * kernel * v[None, :]
    total = flow.sum()
    cost_value = float((flow * cost).sum() / total) if total > 0 else 0.0
    return TransportPlan(
        flow=flow, cost_value=cost_value, iterations_used=iterations, converged=converged
    )


def emd_distance(
    q_patches: np.ndarray,
    g_patches: np.ndarray,
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> float:
    """Patch-set distance; falls back to 1.0 when either side loses all mass."""
    q = np.asarray(q_patches, dtype=np.float64)
    g = np.asarray(g_patches, dtype=np.float64)
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise ShapeError("emd_distance needs nonempty patch sets")
    w_q, w_g = correlation_weights(q, g)
    if w_q.sum() <= 0.0 or w_g.sum() <= 0.0:
        return DEGENERATE_EMD
    cost = pairwise_cosine_distances(q, g)
    plan = sinkhorn_solve(TransportProblem(cost, w_q, w_g), eps, max_iters, tol)
    return plan.cost_value


def combined_distance(d_cos: float, d_emd: float, alpha: float = DEFAULT_ALPHA) -> float:
    """Linear mix of image-level and patch-level distances."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * d_cos + alpha * d_emd


def rank(
    query: EncodedFeature,
    memory: GalleryMemory,
    alpha: float = DEFAULT_ALPHA,
    shortlist: int = DEFAULT_SHORTLIST,
    k: int = 10,
    eps: float = DEFAULT_EPS,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> RankList:
    """Two-stage ranking: cosine shortlist, then combined distance over it.

    ``shortlist`` is clamped to the memory size; ``k`` must not exceed the
    clamped shortlist. Distance ties resolve toward the lower gallery
    position.
    """
    if len(memory) == 0:
        raise InputError("cannot rank against an empty gallery memory")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    shortlist = min(shortlist, len(memory))
    if not 1 <= k <= shortlist:
        raise InputError(f"k={k} must lie in [1, shortlist={shortlist}]")

    d_cos_all = stage1_distances(query, memory)
    short_idx = np.argsort(d_cos_all, kind="stable")[:shortlist]

    scored = []
    for pos in short_idx:
        rec = memory.records[pos]
        d_emd = emd_distance(query.patches, rec.patches, eps, max_iters, tol)
        d_comb = combined_distance(float(d_cos_all[pos]), d_emd, alpha)
        scored.append(
            RankedCandidate(
                position=int(pos),
                d_cos=float(d_cos_all[pos]),
                d_emd=d_emd,
                d_combined=d_comb,
            )
        )
    scored.sort(key=lambda c: (c.d_combined, c.position))
    return RankList(query=query, candidates=scored[:k], shortlist_size=shortlist, k=k)


def stage1_distances(query: EncodedFeature, memory: GalleryMemory) -> np.ndarray:
    """Cosine distance from the query class vector to every gallery record."""
    cls = memory.cls_matrix().astype(np.float64)
    q = np.asarray(query.cls, dtype=np.float64)
    nq = np.linalg.norm(q)
    if nq == 0.0:
        raise DegenerateInputError("query class vector is zero")
    norms = np.linalg.norm(cls, axis=1)
    norms = np.where(norms > 0.0, norms, 1.0)
    return 1.0 - (cls @ q) / (norms * nq)
