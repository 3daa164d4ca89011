"""Token-level synthetic-sample selection.

Low-scoring calibration scenes act as anchors; every synthetic candidate is
scored by its best anchor's priority (gain boost x score demand x cosine) and
the global top-B unique tokens win. Exact ranking only; pools at desk scale
never need approximate neighbors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from autoscale.rng import derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Anchor:
    token_id: str
    cluster: int
    score: float
    embedding: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"anchor score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class RankedCandidate:
    token_id: str
    priority: float
    best_anchor_id: str | None
    anchor_cluster: int | None


@dataclass
class RetrievalResult:
    candidates: list[RankedCandidate]
    shortfall: bool = False
    used_fallback: bool = False

    @property
    def token_ids(self) -> list[str]:
        return [c.token_id for c in self.candidates]


def select_anchors(
    scores: Mapping[str, float],
    assignments: Mapping[str, int],
    embeddings: Mapping[str, np.ndarray],
    max_per_cluster: int = 32,
    score_threshold: float = 0.5,
) -> list[Anchor]:
    """Per cluster, the lowest-scoring calibration scenes at or below the
    threshold, capped at ``max_per_cluster``; ties break by token id."""
    by_cluster: dict[int, list[tuple[float, str]]] = {}
    for token, score in scores.items():
        if score <= score_threshold:
            by_cluster.setdefault(assignments[token], []).append((score, token))
    anchors = []
    for cluster in sorted(by_cluster):
        entries = sorted(by_cluster[cluster])[:max_per_cluster]
        for score, token in entries:
            anchors.append(
                Anchor(
                    token_id=token,
                    cluster=cluster,
                    score=float(score),
                    embedding=np.asarray(embeddings[token], dtype=float),
                )
            )
    return anchors


def priority(anchor: Anchor, candidate_embedding: np.ndarray, alpha) -> float:
    """(1 + gain) * (1 - score) * cos, with negative cosine clamped to 0."""
    alpha = np.asarray(alpha, dtype=float)
    cos = float(anchor.embedding @ np.asarray(candidate_embedding, dtype=float))
    return (1.0 + float(alpha[anchor.cluster])) * (1.0 - anchor.score) * max(cos, 0.0)


def retrieve(
    anchors: Sequence[Anchor],
    pool_embeddings: Mapping[str, np.ndarray],
    alpha,
    budget: int,
    seed: int = 0,
) -> RetrievalResult:
    """Global top-``budget`` unique candidates by best-anchor priority.

    Candidate priority is the max over anchors (dedup rule); sorting is by
    descending priority then token id. Less pool than budget returns the whole
    pool with the shortfall flag; no anchors falls back to uniform sampling.
    """
    pool_ids = sorted(pool_embeddings)
    take = min(budget, len(pool_ids))
    if budget <= 0:
        return RetrievalResult([])
    if not anchors:
        logger.warning("retrieve: no anchors; falling back to uniform sampling")
        rng = derive_rng(seed, "retrieve_fallback")
        chosen = sorted(rng.choice(len(pool_ids), size=take, replace=False).tolist())
        return RetrievalResult(
            [RankedCandidate(pool_ids[i], 0.0, None, None) for i in chosen],
            shortfall=len(pool_ids) < budget,
            used_fallback=True,
        )

    anchors = sorted(anchors, key=lambda a: a.token_id)
    anchor_mat = np.stack([a.embedding for a in anchors])  # (m, d)
    alpha = np.asarray(alpha, dtype=float)
    coef = np.array([(1.0 + alpha[a.cluster]) * (1.0 - a.score) for a in anchors])
    cand_mat = np.stack([np.asarray(pool_embeddings[t], dtype=float) for t in pool_ids])
    scores = np.maximum(cand_mat @ anchor_mat.T, 0.0) * coef[None, :]  # (n, m)
    best_idx = np.argmax(scores, axis=1)  # first max: lowest anchor id wins ties
    best = scores[np.arange(len(pool_ids)), best_idx]

    order = sorted(range(len(pool_ids)), key=lambda i: (-best[i], pool_ids[i]))[:take]
    candidates = [
        RankedCandidate(
            token_id=pool_ids[i],
            priority=float(best[i]),
            best_anchor_id=anchors[best_idx[i]].token_id,
            anchor_cluster=anchors[best_idx[i]].cluster,
        )
        for i in order
    ]
    return RetrievalResult(candidates, shortfall=len(pool_ids) < budget)
