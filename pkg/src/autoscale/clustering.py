"""Embedding-space machinery: PCA, diagonal-covariance GMM clustering,
centroids, calibration mixture, RBF cluster similarity, per-cluster scores.

``PcaReducer`` and ``DiagonalGmm`` follow the sklearn estimator conventions
(fit returns self, fitted attributes carry a trailing underscore, get_params
works) so they compose with pipelines and model selection utilities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from autoscale.rng import derive_rng


def unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot l2-normalize a zero vector")
    return x / norms


class PcaReducer(BaseEstimator, TransformerMixin):
    """Top-n principal directions of centered data, via SVD.

    Component signs are fixed (largest-magnitude coordinate positive) so fits
    are deterministic.
    """

    def __init__(self, n_components: int = 64):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        n_samples, n_features = X.shape
        n = self.n_components
        if n > n_features:
            raise ValueError(f"n_components={n} exceeds feature dim {n_features}")
        if n_samples < n:
            raise ValueError(f"need at least {n} samples, got {n_samples}")
        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        _, s, vt = np.linalg.svd(centered, full_matrices=False)
        rank = int(np.sum(s > max(n_samples, n_features) * np.finfo(float).eps * s[0])) if s[0] > 0 else 0
        if rank < n:
            raise ValueError(f"data rank {rank} below n_components={n}")
        components = vt[:n]
        signs = np.sign(components[np.arange(n), np.argmax(np.abs(components), axis=1)])
        self.components_ = components * signs[:, None]
        self.explained_variance_ = (s[:n] ** 2) / (n_samples - 1)
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, X) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.components_ + self.mean_


class DiagonalGmm(BaseEstimator):
    """Gaussian mixture with diagonal covariances, fit by EM.

    k-means++ initialization, hard assignment for the starting moments, then
    EM until the log-likelihood gain drops below ``tol`` or ``max_iter``.
    A component left empty at initialization (or collapsing during EM) is
    reseeded from the point farthest from the current means. Deterministic
    under ``random_state``.
    """

    def __init__(self, n_components: int = 8, random_state: int = 0,
                 max_iter: int = 100, tol: float = 1e-5, reg_covar: float = 1e-9):
        self.n_components = n_components
        self.random_state = random_state
        self.max_iter = max_iter
        self.tol = tol
        self.reg_covar = reg_covar

    # -- initialization -------------------------------------------------

    def _kmeanspp_centers(self, X: np.ndarray, rng) -> np.ndarray:
        n = X.shape[0]
        centers = [X[rng.integers(n)]]
        for _ in range(1, self.n_components):
            d2 = np.min(
                ((X[:, None, :] - np.asarray(centers)[None, :, :]) ** 2).sum(-1), axis=1
            )
            total = d2.sum()
            if total <= 0:
                centers.append(X[rng.integers(n)])
                continue
            centers.append(X[rng.choice(n, p=d2 / total)])
        return np.asarray(centers)

    def _reseed_empty(self, X: np.ndarray, means: np.ndarray, empty: np.ndarray) -> np.ndarray:
        means = means.copy()
        for k in np.flatnonzero(empty):
            d2 = np.min(((X[:, None, :] - means[None, :, :]) ** 2).sum(-1), axis=1)
            means[k] = X[int(np.argmax(d2))]
        return means

    # -- EM ---------------------------------------------------------------

    def _log_resp(self, X: np.ndarray):
        # log N(x | mu_k, diag(var_k)) + log w_k, per sample and component
        log_det = np.sum(np.log(self.variances_), axis=1)
        diff2 = (X[:, None, :] - self.means_[None, :, :]) ** 2 / self.variances_[None, :, :]
        log_prob = -0.5 * (diff2.sum(-1) + log_det + X.shape[1] * np.log(2 * np.pi))
        weighted = log_prob + np.log(self.weights_)
        norm = _logsumexp_rows(weighted)
        return weighted - norm[:, None], norm

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        n, d = X.shape
        k = self.n_components
        if n < k:
            raise ValueError(f"need at least {k} samples, got {n}")
        rng = derive_rng(self.random_state, "gmm_init")
        means = self._kmeanspp_centers(X, rng)
        labels = np.argmin(((X[:, None, :] - means[None, :, :]) ** 2).sum(-1), axis=1)
        counts = np.bincount(labels, minlength=k)
        if np.any(counts == 0):
            means = self._reseed_empty(X, means, counts == 0)
            labels = np.argmin(((X[:, None, :] - means[None, :, :]) ** 2).sum(-1), axis=1)
            counts = np.bincount(labels, minlength=k)

        global_var = X.var(axis=0) + self.reg_covar
        self.means_ = means
        self.variances_ = np.tile(global_var, (k, 1))
        self.weights_ = np.maximum(counts, 1) / np.maximum(counts, 1).sum()
        for c in range(k):
            if counts[c] > 1:
                self.variances_[c] = X[labels == c].var(axis=0) + self.reg_covar
            self.variances_[c] = np.maximum(self.variances_[c], self.reg_covar)

        history = []
        prev = -np.inf
        for _ in range(self.max_iter):
            log_resp, norm = self._log_resp(X)
            resp = np.exp(log_resp)
            mass = resp.sum(axis=0)
            collapsed = mass < 1e-10
            if np.any(collapsed):
                self.means_ = self._reseed_empty(X, self.means_, collapsed)
                self.variances_[collapsed] = global_var
                self.weights_ = np.maximum(self.weights_, 1.0 / (10 * n))
                self.weights_ /= self.weights_.sum()
                continue
            self.weights_ = mass / n
            self.means_ = (resp.T @ X) / mass[:, None]
            sq = resp.T @ (X**2) / mass[:, None]
            self.variances_ = np.maximum(sq - self.means_**2, self.reg_covar)
            _, norm = self._log_resp(X)
            ll = float(norm.mean())
            history.append(ll)
            if ll - prev < self.tol and np.isfinite(prev):
                break
            prev = ll
        self.log_likelihood_history_ = history
        return self

    def predict_proba(self, X) -> np.ndarray:
        log_resp, _ = self._log_resp(np.atleast_2d(np.asarray(X, dtype=float)))
        return np.exp(log_resp)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def score_samples(self, X) -> np.ndarray:
        _, norm = self._log_resp(np.atleast_2d(np.asarray(X, dtype=float)))
        return norm


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


# --- cluster model -----------------------------------------------------------


@dataclass
class ClusterModel:
    """Fitted clustering of the embedding space plus population statistics.

    ``centroids`` are the GMM component means re-normalized to unit norm in
    the reduced space; ``n0`` counts real tokens per cluster; ``pi`` is the
    calibration mixture. Raw embeddings are l2-normalized, optionally
    PCA-reduced, and re-normalized before scoring against the GMM.
    """

    k: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    centroids: np.ndarray
    n0: np.ndarray
    pi: np.ndarray
    pca_mean: np.ndarray | None = None
    pca_components: np.ndarray | None = None

    def reduce(self, vectors: np.ndarray) -> np.ndarray:
        x = unit_rows(np.atleast_2d(np.asarray(vectors, dtype=float)))
        if self.pca_components is not None:
            x = (x - self.pca_mean) @ self.pca_components.T
        return unit_rows(x)

    def _gmm(self) -> DiagonalGmm:
        g = DiagonalGmm(n_components=self.k)
        g.weights_, g.means_, g.variances_ = self.weights, self.means, self.variances
        return g

    def assign(self, vectors: np.ndarray) -> np.ndarray:
        """Argmax-posterior cluster ids for raw embedding vectors."""
        return self._gmm().predict(self.reduce(vectors))

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "k": self.k,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "centroids": self.centroids.tolist(),
            "n0": self.n0.tolist(),
            "pi": self.pi.tolist(),
            "pca_mean": None if self.pca_mean is None else self.pca_mean.tolist(),
            "pca_components": None
            if self.pca_components is None
            else self.pca_components.tolist(),
        }
        path.write_text(json.dumps(payload))

    @classmethod
    def load(cls, path) -> "ClusterModel":
        d = json.loads(Path(path).read_text())
        return cls(
            k=d["k"],
            weights=np.array(d["weights"]),
            means=np.array(d["means"]),
            variances=np.array(d["variances"]),
            centroids=np.array(d["centroids"]),
            n0=np.array(d["n0"], dtype=int),
            pi=np.array(d["pi"]),
            pca_mean=None if d["pca_mean"] is None else np.array(d["pca_mean"]),
            pca_components=None
            if d["pca_components"] is None
            else np.array(d["pca_components"]),
        )


def build_cluster_model(
    embeddings: Mapping[str, np.ndarray],
    real_ids,
    cal_ids,
    k: int,
    random_state: int = 0,
    pca_dim: int | None = None,
) -> tuple[ClusterModel, dict[str, int]]:
    """Fit the GMM on real-token embeddings and assign every known token.

    Returns the model (centroids, per-cluster real counts, calibration
    mixture) and a token -> cluster map covering all of ``embeddings``.
    """
    real_ids = list(real_ids)
    cal_ids = list(cal_ids)
    real_vecs = unit_rows(np.asarray([embeddings[t] for t in real_ids], dtype=float))

    pca_mean = pca_components = None
    if pca_dim is not None and pca_dim < real_vecs.shape[1]:
        pca = PcaReducer(n_components=pca_dim).fit(real_vecs)
        pca_mean, pca_components = pca.mean_, pca.components_
        real_vecs = unit_rows(pca.transform(real_vecs))

    gmm = DiagonalGmm(n_components=k, random_state=random_state).fit(real_vecs)
    centroids = unit_rows(gmm.means_)

    model = ClusterModel(
        k=k,
        weights=gmm.weights_,
        means=gmm.means_,
        variances=gmm.variances_,
        centroids=centroids,
        n0=np.zeros(k, dtype=int),
        pi=np.zeros(k),
        pca_mean=pca_mean,
        pca_components=pca_components,
    )

    all_ids = sorted(embeddings)
    vecs = np.asarray([embeddings[t] for t in all_ids], dtype=float)
    labels = model.assign(vecs)
    assignments = {t: int(c) for t, c in zip(all_ids, labels)}

    model.n0 = np.bincount([assignments[t] for t in real_ids], minlength=k)
    model.pi = calibration_mixture({t: assignments[t] for t in cal_ids}, k)
    return model, assignments


# --- similarity and scores ---------------------------------------------------


@dataclass(frozen=True)
class SimilarityMatrix:
    r: np.ndarray
    sigma: float


def rbf_similarity(centroids: np.ndarray, sigma: float) -> SimilarityMatrix:
    """R_kj = exp(-(1 - cos(c_k, c_j))^2 / (2 sigma^2)) over unit centroids."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    c = np.asarray(centroids, dtype=float)
    norms = np.linalg.norm(c, axis=1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise ValueError("centroids must be unit-norm")
    cos = np.clip(c @ c.T, -1.0, 1.0)
    r = np.exp(-((1.0 - cos) ** 2) / (2.0 * sigma**2))
    np.fill_diagonal(r, 1.0)
    r = (r + r.T) / 2.0
    return SimilarityMatrix(r=r, sigma=float(sigma))


@dataclass
class ClusterScores:
    """Per-cluster mean scores; clusters with no calibration scenes are NaN
    with a zero count (explicit missing marker)."""

    s_bar: np.ndarray
    counts: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        return self.counts > 0


def calibration_mixture(cal_assignments: Mapping[str, int], k: int) -> np.ndarray:
    """pi_k = calibration share of cluster k."""
    if not cal_assignments:
        raise ValueError("empty calibration set")
    counts = np.bincount(list(cal_assignments.values()), minlength=k).astype(float)
    return counts / counts.sum()


def aggregate_scores(
    scores: Mapping[str, float], assignments: Mapping[str, int], k: int
) -> ClusterScores:
    """Mean per-scene score per cluster over the scored tokens."""
    if not scores:
        raise ValueError("empty calibration scores")
    sums = np.zeros(k)
    counts = np.zeros(k, dtype=int)
    for token, score in scores.items():
        c = assignments[token]
        sums[c] += score
        counts[c] += 1
    s_bar = np.full(k, np.nan)
    mask = counts > 0
    s_bar[mask] = sums[mask] / counts[mask]
    return ClusterScores(s_bar=s_bar, counts=counts)


def overall_score(pi: np.ndarray, s_bar) -> float:
    """pi^T s_bar, skipping missing clusters (their pi must be 0)."""
    pi = np.asarray(pi, dtype=float)
    s = np.asarray(s_bar.s_bar if isinstance(s_bar, ClusterScores) else s_bar, dtype=float)
    mask = np.isfinite(s)
    if np.any(pi[~mask] > 0):
        raise ValueError("cluster with calibration mass has no score")
    return float(pi[mask] @ s[mask])
