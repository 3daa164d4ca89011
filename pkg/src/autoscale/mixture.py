"""Cluster-level mixture optimization.

A linear surrogate maps changes of the log-mixture and of per-cluster
synthetic ratios to per-cluster score changes through a fixed cluster
similarity kernel; its closed-form weighted ridge fit drives an exponentiated
gradient ascent step on the simplex, followed by a feasibility search and
integer augmentation sizes. All operations are pure and deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from autoscale.rng import derive_rng

logger = logging.getLogger(__name__)

MIXTURE_FLOOR = 1e-6  # applied before any log; keeps empty clusters finite
SIMPLEX_ATOL = 1e-9


def _as_weights(w) -> np.ndarray:
    return np.asarray(w.w if isinstance(w, MixtureVector) else w, dtype=float)


@dataclass(frozen=True)
class MixtureVector:
    """Point on the interior of the K-simplex: w_k > 0, sum w = 1."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        if np.any(w <= 0):
            raise ValueError("mixture weights must be strictly positive")
        if abs(w.sum() - 1.0) > SIMPLEX_ATOL:
            raise ValueError(f"mixture weights sum to {w.sum()!r}, not 1")

    def __len__(self) -> int:
        return len(self.w)

    @classmethod
    def from_counts(cls, counts) -> "MixtureVector":
        counts = np.asarray(counts, dtype=float)
        floored = np.maximum(counts, MIXTURE_FLOOR)
        return cls(floored / floored.sum())


@dataclass(frozen=True)
class PredictorParams:
    beta: np.ndarray
    gamma: float
    lambda_reg: float

    def __post_init__(self):
        if not (np.all(np.isfinite(self.beta)) and np.isfinite(self.gamma)):
            raise ValueError("predictor parameters must be finite")


@dataclass(frozen=True)
class PairSample:
    """One regression row: round pair (a -> b), one observed cluster."""

    cluster: int
    delta_logw: np.ndarray  # (K,) log w^(b) - log w^(a)
    delta_r: np.ndarray  # (K,) r(w^(b)) - r(w^(a))
    target: float  # s_bar_k^(b) - s_bar_k^(a)
    weight: float = 1.0


@dataclass(frozen=True)
class GainVector:
    alpha: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("gains must lie in [0, 1]")


def synthetic_ratio(w, n0, n_total: int) -> np.ndarray:
    """r_j = max(0, 1 - n0_j / (w_j N)); w floored to avoid division blowup."""
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    w = np.maximum(_as_weights(w), MIXTURE_FLOOR)
    n0 = np.asarray(n0, dtype=float)
    return np.maximum(0.0, 1.0 - n0 / (w * n_total))


def build_pairs(
    history: Sequence[tuple[object, np.ndarray]],
    n0,
    n_total: int,
    weighting: str = "uniform",
    recency_tau: float = 2.0,
) -> list[PairSample]:
    """All C(t, 2) round pairs, one row per cluster observed in both rounds.

    ``history[t]`` is (mixture, per-cluster scores with NaN for missing).
    ``weighting="recency"`` applies exp(-(t_latest - max(a, b)) / recency_tau).
    """
    if len(history) < 2:
        raise ValueError("need at least 2 rounds of history")
    mixtures = [np.maximum(_as_weights(w), MIXTURE_FLOOR) for w, _ in history]
    scores = [np.asarray(s, dtype=float) for _, s in history]
    ratios = [synthetic_ratio(w, n0, n_total) for w in mixtures]
    latest = len(history) - 1
    pairs: list[PairSample] = []
    for a in range(len(history)):
        for b in range(a + 1, len(history)):
            delta_logw = np.log(mixtures[b]) - np.log(mixtures[a])
            delta_r = ratios[b] - ratios[a]
            if weighting == "recency":
                weight = float(np.exp(-(latest - b) / recency_tau))
            elif weighting == "uniform":
                weight = 1.0
            else:
                raise ValueError(f"unknown pair weighting {weighting!r}")
            target = scores[b] - scores[a]
            for k in np.flatnonzero(np.isfinite(target)):
                pairs.append(
                    PairSample(
                        cluster=int(k),
                        delta_logw=delta_logw,
                        delta_r=delta_r,
                        target=float(target[k]),
                        weight=weight,
                    )
                )
    return pairs


def pair_design_matrix(pairs: Sequence[PairSample], similarity) -> tuple:
    """Feature rows for the surrogate: column j of the beta block carries
    R_kj * dlog w_j; the gamma column carries sum_j R_kj * dr_j."""
    r = np.asarray(similarity.r if hasattr(similarity, "r") else similarity, dtype=float)
    k = r.shape[0]
    x = np.empty((len(pairs), k + 1))
    y = np.empty(len(pairs))
    wts = np.empty(len(pairs))
    for i, p in enumerate(pairs):
        row = r[p.cluster]
        x[i, :k] = row * p.delta_logw
        x[i, k] = row @ p.delta_r
        y[i] = p.target
        wts[i] = p.weight
    return x, y, wts


def fit_predictor(pairs: Sequence[PairSample], similarity, lambda_reg: float) -> PredictorParams:
    """Closed-form weighted ridge: phi = (X'WX + lambda I)^-1 X'W y."""
    if not pairs:
        raise ValueError("need at least one pair row")
    if lambda_reg <= 0:
        raise ValueError("lambda_reg must be positive")
    x, y, wts = pair_design_matrix(pairs, similarity)
    xw = x * wts[:, None]
    a = xw.T @ x + lambda_reg * np.eye(x.shape[1])
    phi = np.linalg.solve(a, xw.T @ y)
    return PredictorParams(beta=phi[:-1], gamma=float(phi[-1]), lambda_reg=float(lambda_reg))


def predict_delta(params: PredictorParams, similarity, w_from, w_to, n0, n_total: int) -> np.ndarray:
    """Predicted per-cluster score change for the mixture move w_from -> w_to."""
    r = np.asarray(similarity.r if hasattr(similarity, "r") else similarity, dtype=float)
    wf = np.maximum(_as_weights(w_from), MIXTURE_FLOOR)
    wt = np.maximum(_as_weights(w_to), MIXTURE_FLOOR)
    delta_logw = np.log(wt) - np.log(wf)
    delta_r = synthetic_ratio(wt, n0, n_total) - synthetic_ratio(wf, n0, n_total)
    return r @ (params.beta * delta_logw) + params.gamma * (r @ delta_r)


def gradient(params: PredictorParams, similarity, pi, w, n0, n_total: int) -> np.ndarray:
    """g_j = (pi^T R)_j (beta_j + gamma n0_j / (w_j N)), in log-mixture space."""
    r = np.asarray(similarity.r if hasattr(similarity, "r") else similarity, dtype=float)
    w = np.maximum(_as_weights(w), MIXTURE_FLOOR)
    n0 = np.asarray(n0, dtype=float)
    pi = np.asarray(pi, dtype=float)
    return (pi @ r) * (params.beta + params.gamma * n0 / (w * n_total))


def half_cosine_schedule(t: int, total_rounds: int, eps_max: float) -> float:
    """eps_t = eps_max * (1 + cos(pi (t-2)/(T-1))) / 2 for rounds t = 2..T."""
    if total_rounds < 2:
        raise ValueError("schedule needs at least 2 rounds")
    if not 2 <= t <= total_rounds:
        raise ValueError(f"round {t} outside schedule range [2, {total_rounds}]")
    return eps_max * 0.5 * (1.0 + np.cos(np.pi * (t - 2) / (total_rounds - 1)))


def eg_update(w_prev, g, eps_t: float, max_eta: float = 1e3, iters: int = 100) -> MixtureVector:
    """Multiplicative update w_k proportional to w_k exp(eta g_k), with eta
    found by bisection so that ||w - w_prev||_2 = eps_t (within 1e-8).

    A constant gradient cancels in the normalization, so the target can be
    unreachable; then eta stays at the bracket cap and a warning is logged.
    """
    w_prev = _as_weights(w_prev)
    g = np.asarray(g, dtype=float)
    g = g - g.max()  # shift-invariant; keeps exp bounded

    def step(eta: float) -> np.ndarray:
        scaled = w_prev * np.exp(eta * g)
        return scaled / scaled.sum()

    def dist(eta: float) -> float:
        return float(np.linalg.norm(step(eta) - w_prev))

    if np.allclose(g, 0.0):
        return MixtureVector(w_prev.copy())
    if dist(max_eta) < eps_t:
        logger.warning(
            "eg_update: step length %.3g unreachable (max %.3g at eta cap)",
            eps_t,
            dist(max_eta),
        )
        return _floored(step(max_eta))
    lo, hi = 0.0, max_eta
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if dist(mid) < eps_t:
            lo = mid
        else:
            hi = mid
    return _floored(step(hi))


def _floored(w: np.ndarray) -> MixtureVector:
    if np.any(w < MIXTURE_FLOOR):
        logger.warning("mixture floored at %g to stay strictly positive", MIXTURE_FLOOR)
        w = np.maximum(w, MIXTURE_FLOOR)
        w = w / w.sum()
    return MixtureVector(w)


@dataclass(frozen=True)
class MixtureConstraints:
    """Box constraints on the simplex: lower = n0/N (real data preserved),
    upper = (n0 + pool_k)/N (per-cluster synthetic availability)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.sum() > 1.0 + SIMPLEX_ATOL:
            raise AssertionError("lower bounds exceed the simplex; infeasible by construction")
        if hi.sum() < 1.0 - SIMPLEX_ATOL:
            raise AssertionError("upper bounds cannot reach the simplex")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def from_counts(cls, n0, pool_sizes, n_total: int) -> "MixtureConstraints":
        n0 = np.asarray(n0, dtype=float)
        pool = np.asarray(pool_sizes, dtype=float)
        return cls(lower=n0 / n_total, upper=np.minimum((n0 + pool) / n_total, 1.0))

    def satisfied(self, w) -> bool:
        w = _as_weights(w)
        return bool(
            np.all(w >= self.lower - SIMPLEX_ATOL)
            and np.all(w <= self.upper + SIMPLEX_ATOL)
            and abs(w.sum() - 1.0) <= SIMPLEX_ATOL
        )

    def project(self, w) -> np.ndarray:
        """Clip to the lower bounds, then distribute remaining mass
        proportionally to the clipped slack (iterating on upper bounds)."""
        w = _as_weights(w)
        slack = np.clip(w - self.lower, 0.0, None)
        budget = 1.0 - self.lower.sum()
        if budget <= 0:
            return self.lower / self.lower.sum()
        out = self.lower + (slack * budget / slack.sum() if slack.sum() > 0 else budget / len(w))
        for _ in range(len(w)):
            over = out - self.upper
            if np.all(over <= SIMPLEX_ATOL):
                break
            excess = np.sum(over[over > 0])
            out = np.minimum(out, self.upper)
            room = self.upper - out
            open_idx = room > SIMPLEX_ATOL
            if not np.any(open_idx):
                break
            out[open_idx] += excess * room[open_idx] / room[open_idx].sum()
        return out / out.sum()


def feasible_search(
    candidate,
    constraints: MixtureConstraints,
    params: PredictorParams,
    similarity,
    pi,
    w_prev,
    n0,
    n_total: int,
    seed: int,
    n_samples: int = 64,
    concentration: float = 200.0,
) -> MixtureVector:
    """Return the candidate if feasible; otherwise sample Dirichlet
    perturbations around its projection and keep the feasible one with the
    best predicted overall improvement from ``w_prev``; fall back to the
    projection itself."""
    cand = _as_weights(candidate)
    if constraints.satisfied(cand):
        return MixtureVector(cand)
    center = constraints.project(cand)
    rng = derive_rng(seed, "feasible_search")
    pi = np.asarray(pi, dtype=float)
    best, best_gain = None, -np.inf
    for _ in range(n_samples):
        sample = rng.dirichlet(np.maximum(center, MIXTURE_FLOOR) * concentration)
        if not constraints.satisfied(sample):
            continue
        gain = float(pi @ predict_delta(params, similarity, w_prev, sample, n0, n_total))
        if gain > best_gain:
            best, best_gain = sample, gain
    if best is None:
        best = center
    return _floored(np.asarray(best))


def augmentation_sizes(w, n0, n_total: int) -> np.ndarray:
    """delta_k = max(round(w_k N) - n0_k, 0), round-half-to-even, then a
    largest-remainder correction so the sizes sum exactly to B = N - sum n0."""
    w = _as_weights(w)
    n0 = np.asarray(n0, dtype=int)
    budget = int(n_total - n0.sum())
    exact = w * n_total - n0
    delta = np.maximum(np.rint(w * n_total).astype(int) - n0, 0)
    residual = exact - delta
    # bump the clusters with the largest residual (ties by index) until exact
    while delta.sum() < budget:
        order = np.lexsort((np.arange(len(delta)), -residual))
        k = order[0]
        delta[k] += 1
        residual[k] -= 1.0
    while delta.sum() > budget:
        eligible = delta > 0
        masked = np.where(eligible, residual, np.inf)
        order = np.lexsort((np.arange(len(delta)), masked))
        k = order[0]
        delta[k] -= 1
        residual[k] += 1.0
    return delta


def gains(params: PredictorParams, similarity, w_prev, w_new, n0, n_total: int) -> GainVector:
    """Predicted per-cluster improvements normalized into [0, 1]; all
    non-positive predictions give the zero gain vector."""
    delta = predict_delta(params, similarity, w_prev, w_new, n0, n_total)
    peak = delta.max()
    if peak <= 0:
        return GainVector(np.zeros_like(delta))
    return GainVector(np.maximum(delta, 0.0) / peak)
