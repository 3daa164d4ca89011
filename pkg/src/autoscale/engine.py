"""Round-loop orchestration: baseline round, heuristic retrieval round, then
surrogate-guided mixture updates, with method dispatch to the reference
selectors, append-only JSONL round logging, and checkpoint/resume.

Embeddings are extracted once, upstream, and passed in as a token -> vector
table; the loop itself is a pure function of (datasets, oracle, config,
embeddings) and reruns bit-identically under the same seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Protocol

import numpy as np

from autoscale import baselines, mixture, retrieval
from autoscale.clustering import (
    ClusterModel,
    ClusterScores,
    aggregate_scores,
    build_cluster_model,
    overall_score,
    rbf_similarity,
)
from autoscale.driving_metrics import jaccard
from autoscale.rng import stable_hash
from autoscale.scenes import Dataset

LOG_SCHEMA_VERSION = 1
METHODS = ("autoscale", "uniform", "iwr", "chameleon")


class EngineError(RuntimeError):
    pass


class PolicyOracle(Protocol):
    """Closes the loop: train on a token set, evaluate per-scene scores in
    [0, 1] covering every calibration token; evaluate must be deterministic
    for a fixed handle."""

    def train(self, token_ids) -> Any: ...

    def evaluate(self, handle, cal: Dataset) -> Mapping[str, float]: ...


@dataclass(frozen=True)
class EngineConfig:
    budget: int = 500
    rounds: int = 5
    clusters: int = 8
    sigma: float = 0.5
    lambda_reg: float = 1.0
    eps_max: float = 0.1
    seed: int = 0
    method: str = "autoscale"
    pca_dim: int | None = None
    anchor_limit: int = 32
    anchor_threshold: float = 0.5
    pair_weighting: str = "uniform"
    recency_tau: float = 2.0
    iwr_components: int = 16
    chameleon_ridge: float = 0.1

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.clusters < 1:
            raise ValueError("clusters must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.sigma <= 0 or self.lambda_reg <= 0 or self.eps_max <= 0:
            raise ValueError("sigma, lambda_reg, and eps_max must be positive")


@dataclass
class RoundRecord:
    round: int
    mixture: list[float]
    cluster_scores: dict  # {"s_bar": [float|None], "counts": [int]}
    overall: float
    selected: list[str]
    predictor: dict | None = None  # {"beta": [...], "gamma": f, "lambda_reg": f}
    gains: list[float] | None = None
    timing: float = 0.0
    schema_version: int = LOG_SCHEMA_VERSION

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "round": self.round,
            "mixture": self.mixture,
            "cluster_scores": self.cluster_scores,
            "overall": self.overall,
            "selected": self.selected,
            "predictor": self.predictor,
            "gains": self.gains,
            "timing": self.timing,
        }
        return json.dumps(payload, separators=(",", ":"))

    @classmethod
    def from_json(cls, payload: dict) -> "RoundRecord":
        return cls(
            round=payload["round"],
            mixture=payload["mixture"],
            cluster_scores=payload["cluster_scores"],
            overall=payload["overall"],
            selected=payload["selected"],
            predictor=payload.get("predictor"),
            gains=payload.get("gains"),
            timing=payload.get("timing", 0.0),
            schema_version=payload["schema_version"],
        )

    def s_bar_array(self) -> np.ndarray:
        return np.array(
            [np.nan if v is None else v for v in self.cluster_scores["s_bar"]], dtype=float
        )


def _scores_payload(scores: ClusterScores) -> dict:
    return {
        "s_bar": [None if not np.isfinite(v) else float(v) for v in scores.s_bar],
        "counts": [int(c) for c in scores.counts],
    }


def load_round_log(path) -> list[RoundRecord]:
    """Parse a round log; any malformed line is an error naming the line."""
    records = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.endswith("\n"):
                raise EngineError(f"{path}:{lineno}: truncated record (no trailing newline)")
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise EngineError(f"{path}:{lineno}: unparseable record: {exc}") from exc
            if payload.get("schema_version") != LOG_SCHEMA_VERSION:
                raise EngineError(
                    f"{path}:{lineno}: schema_version {payload.get('schema_version')!r} "
                    f"not supported (expected {LOG_SCHEMA_VERSION})"
                )
            try:
                records.append(RoundRecord.from_json(payload))
            except KeyError as exc:
                raise EngineError(f"{path}:{lineno}: missing field {exc}") from exc
    for i, rec in enumerate(records):
        if rec.round != i:
            raise EngineError(f"{path}: record {i} has round {rec.round}; rounds must be 0,1,2,...")
    return records


def canonical_log_bytes(path, include_timing: bool = False) -> bytes:
    """Log content for byte comparison; the wall-clock timing field is the
    one nondeterministic field and is masked unless requested."""
    out = []
    for rec in load_round_log(path):
        if not include_timing:
            rec.timing = 0.0
        out.append(rec.to_json())
    return ("\n".join(out) + "\n").encode("utf-8")


@dataclass
class ClusterState:
    model: ClusterModel
    assignments: dict[str, int]


def prepare_clusters(
    embeddings: Mapping[str, np.ndarray],
    real: Dataset,
    cal: Dataset,
    config: EngineConfig,
) -> ClusterState:
    model, assignments = build_cluster_model(
        embeddings,
        real_ids=real.token_ids(),
        cal_ids=cal.token_ids(),
        k=config.clusters,
        random_state=config.seed,
        pca_dim=config.pca_dim,
    )
    return ClusterState(model=model, assignments=assignments)


class _Run:
    """State for one engine run; sequential by nature (each round depends on
    the previous evaluation)."""

    def __init__(self, real, syn_pool, cal, oracle, config, embeddings, clusters, log_path):
        self.real, self.syn_pool, self.cal = real, syn_pool, cal
        self.oracle, self.config, self.embeddings = oracle, config, embeddings
        self.clusters = clusters
        self.log_path = Path(log_path) if log_path else None
        self.records: list[RoundRecord] = []
        self.last_scene_scores: dict[str, float] = {}

        ids = set(real.token_ids()) | set(syn_pool.token_ids()) | set(cal.token_ids())
        if len(ids) != len(real) + len(syn_pool) + len(cal):
            raise EngineError("real, synthetic, and calibration token ids must be disjoint")
        missing = [t for t in ids if t not in embeddings]
        if missing:
            raise EngineError(f"{len(missing)} tokens lack embeddings, e.g. {sorted(missing)[0]!r}")

        st = self.clusters
        self.k = config.clusters
        self.n0 = st.model.n0
        self.pi = st.model.pi
        self.similarity = rbf_similarity(st.model.centroids, config.sigma)
        self.n_total = int(self.n0.sum()) + config.budget
        self.pool_ids = syn_pool.token_ids()
        self.pool_sizes = np.bincount(
            [st.assignments[t] for t in self.pool_ids], minlength=self.k
        )
        self.syn_embeddings = {t: embeddings[t] for t in self.pool_ids}

    # -- helpers ----------------------------------------------------------

    def evaluate_selection(self, selected: list[str]) -> tuple[dict[str, float], ClusterScores, float]:
        training = self.real.token_ids() + list(selected)
        handle = self.oracle.train(training)
        scene_scores = dict(self.oracle.evaluate(handle, self.cal))
        missing = set(self.cal.token_ids()) - set(scene_scores)
        if missing:
            raise EngineError(f"oracle left {len(missing)} calibration scenes unscored")
        scores = aggregate_scores(scene_scores, self.clusters.assignments, self.k)
        return scene_scores, scores, overall_score(self.pi, scores)

    def realized_mixture(self, selected: list[str]) -> mixture.MixtureVector:
        counts = self.n0 + np.bincount(
            [self.clusters.assignments[t] for t in selected], minlength=self.k
        )
        return mixture.MixtureVector.from_counts(counts)

    def anchors(self) -> list[retrieval.Anchor]:
        return retrieval.select_anchors(
            self.last_scene_scores,
            self.clusters.assignments,
            {t: self.embeddings[t] for t in self.last_scene_scores},
            max_per_cluster=self.config.anchor_limit,
            score_threshold=self.config.anchor_threshold,
        )

    def append_record(self, record: RoundRecord):
        self.records.append(record)
        if self.log_path:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            mode = "a" if record.round > 0 else "w"
            with self.log_path.open(mode, encoding="utf-8") as fh:
                fh.write(record.to_json())
                fh.write("\n")

    def record_round(self, t, selected, predictor=None, gains=None, started=None):
        scene_scores, scores, overall = self.evaluate_selection(selected)
        self.last_scene_scores = scene_scores
        w = (
            mixture.MixtureVector.from_counts(self.n0)
            if t == 0
            else self.realized_mixture(selected)
        )
        self.append_record(
            RoundRecord(
                round=t,
                mixture=[float(x) for x in w.w],
                cluster_scores=_scores_payload(scores),
                overall=overall,
                selected=sorted(selected),
                predictor=predictor,
                gains=gains,
                timing=time.perf_counter() - started if started else 0.0,
            )
        )

    # -- rounds -----------------------------------------------------------

    def history(self):
        return [(np.asarray(r.mixture), r.s_bar_array()) for r in self.records]

    def autoscale_round(self, t: int):
        started = time.perf_counter()
        config = self.config
        if t == 1:
            alpha = np.zeros(self.k)
            predictor = None
            gains_payload = None
        else:
            pairs = mixture.build_pairs(
                self.history(),
                n0=self.n0,
                n_total=self.n_total,
                weighting=config.pair_weighting,
                recency_tau=config.recency_tau,
            )
            params = mixture.fit_predictor(pairs, self.similarity, config.lambda_reg)
            best = int(np.argmax([r.overall for r in self.records]))
            w_prev = np.asarray(self.records[best].mixture)
            g = mixture.gradient(params, self.similarity, self.pi, w_prev, self.n0, self.n_total)
            eps_t = mixture.half_cosine_schedule(t, config.rounds, config.eps_max)
            candidate = mixture.eg_update(w_prev, g, eps_t)
            constraints = mixture.MixtureConstraints.from_counts(
                self.n0, self.pool_sizes, self.n_total
            )
            target = mixture.feasible_search(
                candidate, constraints, params, self.similarity, self.pi, w_prev,
                self.n0, self.n_total, seed=stable_hash(config.seed, "feasible", t),
            )
            mixture.augmentation_sizes(target, self.n0, self.n_total)
            alpha_vec = mixture.gains(params, self.similarity, w_prev, target, self.n0, self.n_total)
            alpha = alpha_vec.alpha
            predictor = {
                "beta": [float(b) for b in params.beta],
                "gamma": params.gamma,
                "lambda_reg": params.lambda_reg,
            }
            gains_payload = [float(a) for a in alpha]
        result = retrieval.retrieve(
            self.anchors(), self.syn_embeddings, alpha, config.budget,
            seed=stable_hash(config.seed, "retrieve", t),
        )
        self.record_round(t, result.token_ids, predictor, gains_payload, started)

    def baseline_round(self):
        started = time.perf_counter()
        config = self.config
        if config.method == "uniform":
            selected = baselines.uniform_select(self.pool_ids, config.budget, config.seed)
        elif config.method == "iwr":
            real_emb = {t: self.embeddings[t] for t in self.real.token_ids()}
            selected, _ = baselines.iwr_select(
                real_emb, self.syn_embeddings, config.budget, config.iwr_components
            )
        elif config.method == "chameleon":
            centroids = self.clusters.model.centroids
            reduced = {
                t: v for t, v in zip(
                    self.pool_ids,
                    self.clusters.model.reduce(
                        np.asarray([self.embeddings[t] for t in self.pool_ids])
                    ),
                )
            }
            assignments = baselines.assign_nearest_centroid(reduced, centroids)
            selected, _ = baselines.chameleon_select(
                centroids, assignments, config.budget,
                ridge=config.chameleon_ridge, seed=config.seed,
            )
        else:  # pragma: no cover
            raise EngineError(f"unknown baseline method {config.method!r}")
        self.record_round(1, selected, started=started)


def run(
    real: Dataset,
    syn_pool: Dataset,
    cal: Dataset,
    oracle: PolicyOracle,
    config: EngineConfig,
    embeddings: Mapping[str, np.ndarray],
    log_path=None,
    resume: bool = False,
    cluster_state: ClusterState | None = None,
) -> list[RoundRecord]:
    """Execute the full loop: round 0 trains on real data only; round 1
    retrieves with zero gains (autoscale) or runs the configured baseline
    selector; rounds 2..T fit the surrogate on all historical pairs, take a
    calibrated EG step from the best historical mixture, and retrieve with
    the predicted gains. Baseline methods stop after their single selection
    round. On oracle failure the partial log is preserved.
    """
    clusters = cluster_state or prepare_clusters(embeddings, real, cal, config)
    state = _Run(real, syn_pool, cal, oracle, config, embeddings, clusters, log_path)

    start_round = 0
    if resume:
        if not log_path:
            raise EngineError("resume requires a log path")
        path = Path(log_path)
        if path.exists() and path.stat().st_size > 0:
            state.records = load_round_log(path)
            start_round = len(state.records)
            last = state.records[-1]
            # recover the per-scene calibration scores of the last completed
            # round; oracle evaluation is deterministic for a fixed handle
            scene_scores, _, overall = state.evaluate_selection(last.selected)
            if abs(overall - last.overall) > 1e-12:
                raise EngineError(
                    f"{path}: logged overall {last.overall!r} does not match the oracle "
                    f"({overall!r}); wrong oracle, config, or a foreign log"
                )
            state.last_scene_scores = scene_scores

    total_rounds = config.rounds if config.method == "autoscale" else 1
    for t in range(start_round, total_rounds + 1):
        started = time.perf_counter()
        if t == 0:
            state.record_round(0, [], started=started)
        elif config.method == "autoscale":
            state.autoscale_round(t)
        else:
            state.baseline_round()
    return state.records


def best_round(records) -> RoundRecord:
    """The run's product: the round with the best overall score (the loop
    warm-starts from it, and the returned policy is the best one trained)."""
    if not records:
        raise EngineError("no rounds recorded")
    return records[int(np.argmax([r.overall for r in records]))]


@dataclass
class SwapResult:
    jaccard: float
    table: dict[str, float]  # self/cross overall scores per oracle
    selected_a: list[str]
    selected_b: list[str]
    records_a: list[RoundRecord] = field(repr=False, default_factory=list)
    records_b: list[RoundRecord] = field(repr=False, default_factory=list)


def swap_experiment(
    oracle_a: PolicyOracle,
    oracle_b: PolicyOracle,
    real: Dataset,
    syn_pool: Dataset,
    cal: Dataset,
    config: EngineConfig,
    embeddings: Mapping[str, np.ndarray],
) -> SwapResult:
    """Run the engine once per oracle on the same pools, compare the final
    selections (Jaccard), and evaluate each oracle on the other's selection."""
    clusters = prepare_clusters(embeddings, real, cal, config)
    records_a = run(real, syn_pool, cal, oracle_a, config, embeddings, cluster_state=clusters)
    records_b = run(real, syn_pool, cal, oracle_b, config, embeddings, cluster_state=clusters)
    sel_a, sel_b = best_round(records_a).selected, best_round(records_b).selected

    def score(oracle, selected) -> float:
        handle = oracle.train(real.token_ids() + list(selected))
        scene_scores = dict(oracle.evaluate(handle, cal))
        scores = aggregate_scores(scene_scores, clusters.assignments, config.clusters)
        return overall_score(clusters.model.pi, scores)

    table = {
        "a_on_a": score(oracle_a, sel_a),
        "a_on_b": score(oracle_a, sel_b),
        "b_on_b": score(oracle_b, sel_b),
        "b_on_a": score(oracle_b, sel_a),
    }
    return SwapResult(
        jaccard=jaccard(sel_a, sel_b),
        table=table,
        selected_a=sel_a,
        selected_b=sel_b,
        records_a=records_a,
        records_b=records_b,
    )
