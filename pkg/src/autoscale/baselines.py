"""Reference data-mixture selectors: Uniform, IWR, Chameleon.

All selectors share the retrieval module's contract: unique tokens from the
pool, count min(B, pool size), deterministic under seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from autoscale.clustering import PcaReducer
from autoscale.rng import derive_rng

logger = logging.getLogger(__name__)

LOG_WEIGHT_CLIP = 100.0


@dataclass(frozen=True)
class ImportanceWeight:
    token_id: str
    log_weight: float

    def __post_init__(self):
        object.__setattr__(
            self, "log_weight", float(np.clip(self.log_weight, -LOG_WEIGHT_CLIP, LOG_WEIGHT_CLIP))
        )


@dataclass(frozen=True)
class ClusterBudget:
    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=int)
        c.setflags(write=False)
        object.__setattr__(self, "c", c)
        if np.any(c < 0):
            raise ValueError("cluster budgets must be nonnegative")


def uniform_select(pool_ids, budget: int, seed: int) -> list[str]:
    """B tokens without replacement; whole pool (with a warning) if short."""
    pool_ids = sorted(pool_ids)
    if budget >= len(pool_ids):
        if budget > len(pool_ids):
            logger.warning("uniform_select: pool %d short of budget %d", len(pool_ids), budget)
        return pool_ids
    rng = derive_rng(seed, "uniform_select")
    idx = rng.choice(len(pool_ids), size=budget, replace=False)
    return [pool_ids[i] for i in sorted(idx.tolist())]


def _gaussian_kde_logpdf(query: np.ndarray, points: np.ndarray, bandwidth: float) -> np.ndarray:
    """Product-Gaussian KDE with a shared scalar bandwidth."""
    n, dim = points.shape
    d2 = ((query[:, None, :] - points[None, :, :]) ** 2).sum(-1)
    log_norm = np.log(n) + dim * np.log(bandwidth * np.sqrt(2.0 * np.pi))
    return logsumexp(-0.5 * d2 / bandwidth**2, axis=1) - log_norm


def scott_bandwidth(n_samples: int, n_dims: int) -> float:
    """h = n^(-1/(d+4))."""
    return float(n_samples) ** (-1.0 / (n_dims + 4))


def iwr_importance_weights(
    real_embeddings: Mapping[str, np.ndarray],
    syn_embeddings: Mapping[str, np.ndarray],
    n_components: int = 16,
    bandwidth_from_each_set: bool = False,
) -> list[ImportanceWeight]:
    """Density-ratio log-weights log p_real - log p_syn for every synthetic
    token, after a joint PCA to ``n_components`` dims; clipped to +-100.

    Both KDEs use the Scott bandwidth computed from the real-set count, as
    specified; ``bandwidth_from_each_set`` switches the synthetic KDE to its
    own count.
    """
    if not real_embeddings or not syn_embeddings:
        raise ValueError("both embedding sets must be nonempty")
    real_ids = sorted(real_embeddings)
    syn_ids = sorted(syn_embeddings)
    real = np.asarray([real_embeddings[t] for t in real_ids], dtype=float)
    syn = np.asarray([syn_embeddings[t] for t in syn_ids], dtype=float)

    joint = np.concatenate([real, syn], axis=0)
    pca = PcaReducer(n_components=n_components).fit(joint)
    real_p = pca.transform(real)
    syn_p = pca.transform(syn)

    h_real = scott_bandwidth(len(real_ids), n_components)
    h_syn = scott_bandwidth(len(syn_ids) if bandwidth_from_each_set else len(real_ids), n_components)
    log_real = _gaussian_kde_logpdf(syn_p, real_p, h_real)
    log_syn = _gaussian_kde_logpdf(syn_p, syn_p, h_syn)
    return [ImportanceWeight(t, lw) for t, lw in zip(syn_ids, log_real - log_syn)]


def iwr_select(
    real_embeddings: Mapping[str, np.ndarray],
    syn_embeddings: Mapping[str, np.ndarray],
    budget: int,
    n_components: int = 16,
    bandwidth_from_each_set: bool = False,
) -> tuple[list[str], list[ImportanceWeight]]:
    """Top-B synthetic tokens by importance weight, ties by token id."""
    weights = iwr_importance_weights(
        real_embeddings, syn_embeddings, n_components, bandwidth_from_each_set
    )
    ranked = sorted(weights, key=lambda w: (-w.log_weight, w.token_id))
    take = min(budget, len(ranked))
    if take < budget:
        logger.warning("iwr_select: pool %d short of budget %d", len(ranked), budget)
    return [w.token_id for w in ranked[:take]], weights


def krls_leverage_scores(centroids: np.ndarray, ridge: float) -> np.ndarray:
    """gamma_k = [R (R + K lambda I)^-1]_kk with R the centroid cosine matrix."""
    c = np.asarray(centroids, dtype=float)
    k = c.shape[0]
    r = c @ c.T
    solved = np.linalg.solve(r + k * ridge * np.eye(k), r)
    gamma = np.diag(solved).copy()  # R, M^-1 symmetric, so diag(R M^-1) = diag(M^-1 R)
    if np.any(gamma <= 0):
        raise AssertionError("leverage scores must be positive for PSD R and ridge > 0")
    return gamma


def chameleon_budgets(centroids: np.ndarray, budget: int, ridge: float) -> ClusterBudget:
    """Per-cluster budgets c_k = round(w_k B) from exp(1/gamma) weights, with
    a greedy integer correction enforcing sum c = B exactly."""
    gamma = krls_leverage_scores(centroids, ridge)
    logits = 1.0 / gamma
    w = np.exp(logits - logits.max())
    w = w / w.sum()
    exact = w * budget
    c = np.rint(exact).astype(int)
    residual = exact - c
    while c.sum() < budget:  # most under-allocated first, ties by cluster index
        k = np.lexsort((np.arange(len(c)), -residual))[0]
        c[k] += 1
        residual[k] -= 1.0
    while c.sum() > budget:  # most over-allocated first; over-allocated implies c > 0
        k = np.lexsort((np.arange(len(c)), residual))[0]
        c[k] -= 1
        residual[k] += 1.0
    return ClusterBudget(c)


def chameleon_select(
    centroids: np.ndarray,
    pool_assignments: Mapping[str, int],
    budget: int,
    ridge: float = 0.1,
    seed: int = 0,
) -> tuple[list[str], ClusterBudget]:
    """Draw each cluster's budget uniformly from its pool (nearest-centroid
    assignments); shortfalls are filled uniformly from the unselected rest."""
    budgets = chameleon_budgets(centroids, budget, ridge)
    pools: dict[int, list[str]] = {}
    for token, cluster in pool_assignments.items():
        pools.setdefault(int(cluster), []).append(token)
    rng = derive_rng(seed, "chameleon_select")
    selected: list[str] = []
    for k in range(len(budgets.c)):
        pool = sorted(pools.get(k, []))
        want = int(budgets.c[k])
        if want >= len(pool):
            selected.extend(pool)
        else:
            idx = rng.choice(len(pool), size=want, replace=False)
            selected.extend(pool[i] for i in sorted(idx.tolist()))
    shortfall = min(budget, len(pool_assignments)) - len(selected)
    if shortfall > 0:
        rest = sorted(set(pool_assignments) - set(selected))
        idx = rng.choice(len(rest), size=shortfall, replace=False)
        selected.extend(rest[i] for i in sorted(idx.tolist()))
    return selected, budgets


def assign_nearest_centroid(
    embeddings: Mapping[str, np.ndarray], centroids: np.ndarray
) -> dict[str, int]:
    ids = sorted(embeddings)
    vecs = np.asarray([embeddings[t] for t in ids], dtype=float)
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    sims = (vecs / np.where(norms == 0, 1.0, norms)) @ np.asarray(centroids, dtype=float).T
    return {t: int(c) for t, c in zip(ids, np.argmax(sims, axis=1))}
