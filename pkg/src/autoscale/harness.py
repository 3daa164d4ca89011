"""Desk-scale closed loop: procedural scene generation plus a ground-truth
mixture-response oracle, so the engine can be run and validated end to end
without a real planner.

Each scene belongs to a hidden archetype that drives the oracle's response;
the archetype is never exposed through engine-facing types (datasets carry
only graphs, labels, and optional metrics). The response family is richer
than the engine's surrogate (hidden transfer matrix, clipping, noise) so the
optimizer is tested under model misspecification.

Scenes are generated in the ego-centric frame of the last history step
(a convention of this generator, not a requirement of the data model).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from autoscale.driving_metrics import SubscoreVector
from autoscale.rng import derive_rng, stable_hash
from autoscale.scenes import (
    Command,
    Dataset,
    DirectedEdge,
    EdgeKind,
    Node,
    NodeKind,
    Provenance,
    SceneGraph,
    SceneToken,
    SemanticLabels,
    split_calibration,
    wrap_angle,
)

DT = 0.5  # seconds per step


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchetypeSpec:
    """Generative and response parameters of one hidden scene category."""

    name: str
    curvature: float
    speed: float
    real_count: int
    syn_count: int
    base_score: float
    data_return: float
    speed_end: float | None = None  # None keeps speed constant
    curvature_wobble: float = 0.0
    agent_rate: float = 2.0
    crossing: bool = False

    def __post_init__(self):
        if not 0.0 <= self.base_score <= 1.0:
            raise ValueError("base_score must lie in [0, 1]")


@dataclass(frozen=True)
class WorldSpec:
    archetypes: tuple[ArchetypeSpec, ...]
    seed: int = 0
    t_len: int = 12
    t_hist: int = 8
    t_fut: int = 4
    noise_sigma: float = 0.05
    scene_sigma: float = 0.18  # persistent per-scene difficulty spread
    synth_ratio_coeff: float = -0.02
    transfer_strength: float = 0.25
    m0_floor: float = 60.0  # reference count floor: slows log-term saturation
    transfer: tuple | None = None  # explicit matrix overrides the built one
    cal_fraction: float = 1.0 / 11.0
    eval_draws: int = 10
    metric_fraction: float = 1.0  # share of real scenes given subscore vectors

    def __post_init__(self):
        object.__setattr__(self, "archetypes", tuple(self.archetypes))
        if len(self.archetypes) < 1:
            raise ValueError("need at least one archetype")

    @property
    def k(self) -> int:
        return len(self.archetypes)

    def transfer_matrix(self) -> np.ndarray:
        """Hidden transfer T: identity diagonal, off-diagonals proportional to
        archetype parameter similarity, row mass capped by transfer_strength
        (keeps T diagonally dominant)."""
        if self.transfer is not None:
            t = np.asarray(self.transfer, dtype=float)
            if t.shape != (self.k, self.k):
                raise ValueError("explicit transfer matrix has wrong shape")
            return t
        k = self.k
        params = np.array(
            [
                [a.curvature / 0.1, abs(a.curvature) / 0.1, a.speed / 5.0, 2.0 * a.crossing]
                for a in self.archetypes
            ]
        )
        d2 = ((params[:, None, :] - params[None, :, :]) ** 2).sum(-1)
        sim = np.exp(-d2 / 2.0)
        np.fill_diagonal(sim, 0.0)
        t = np.eye(k)
        rows = sim.sum(axis=1)
        for i in range(k):
            if rows[i] > 0:
                t[i] += self.transfer_strength * sim[i] / max(rows[i], 1.0)
        return t

    def generative_fingerprint(self) -> tuple:
        """Everything that determines the scenes (not the response)."""
        gen = tuple(
            (a.name, a.curvature, a.curvature_wobble, a.speed, a.speed_end,
             a.agent_rate, a.crossing, a.real_count, a.syn_count)
            for a in self.archetypes
        )
        return (gen, self.seed, self.t_len, self.t_hist, self.t_fut, self.cal_fraction)


def default_world_spec(seed: int = 0, scale: str = "desk") -> WorldSpec:
    """Eight archetypes; the real set is deliberately archetype-imbalanced
    while the synthetic pool covers all archetypes roughly evenly."""
    bases = [
        # name, curvature, wobble, speed, speed_end, agents, crossing, a_k, b_k
        ("straight_cruise", 0.00, 0.00, 12.0, None, 2.0, False, 0.70, 0.02),
        ("gentle_left", 0.04, 0.00, 9.0, None, 2.0, False, 0.66, 0.03),
        ("gentle_right", -0.04, 0.00, 9.0, None, 2.0, False, 0.60, 0.04),
        ("stop_yield", 0.00, 0.00, 8.0, 0.0, 3.0, False, 0.52, 0.06),
        ("sharp_left_turn", 0.09, 0.00, 6.0, None, 2.0, False, 0.42, 0.10),
        ("ped_crossing", 0.00, 0.00, 4.0, 2.0, 3.0, True, 0.34, 0.12),
        ("roundabout", 0.14, 0.03, 5.0, None, 4.0, False, 0.26, 0.14),
        ("dense_swerve", 0.00, 0.10, 7.0, None, 5.0, False, 0.20, 0.14),
    ]
    if scale == "desk":
        real = [236, 192, 128, 96, 64, 40, 28, 16]
        syn = [550] * 8
        cal_fraction = 400.0 / 4400.0
    elif scale == "small":
        real = [59, 48, 32, 24, 16, 10, 7, 4]
        syn = [140] * 8
        cal_fraction = 100.0 / 1120.0
    else:
        raise ValueError(f"unknown scale {scale!r}")
    archetypes = tuple(
        ArchetypeSpec(
            name=n, curvature=c, curvature_wobble=w, speed=v, speed_end=ve,
            agent_rate=ar, crossing=cr, base_score=a, data_return=b,
            real_count=real[i], syn_count=syn[i],
        )
        for i, (n, c, w, v, ve, ar, cr, a, b) in enumerate(bases)
    )
    return WorldSpec(archetypes=archetypes, seed=seed, cal_fraction=cal_fraction)


# --- scene generation --------------------------------------------------------


def _integrate(v: np.ndarray, kappa: np.ndarray, x0=0.0, y0=0.0, theta0=0.0):
    """Kinematically smooth rollout of [x, y, theta, kappa, v] rows."""
    t_len = len(v)
    x, y, theta = np.empty(t_len), np.empty(t_len), np.empty(t_len)
    x[0], y[0], theta[0] = x0, y0, theta0
    for t in range(1, t_len):
        theta[t] = theta[t - 1] + kappa[t - 1] * v[t - 1] * DT
        x[t] = x[t - 1] + v[t - 1] * math.cos(theta[t - 1]) * DT
        y[t] = y[t - 1] + v[t - 1] * math.sin(theta[t - 1]) * DT
    return np.column_stack([x, y, theta, kappa, v])


def _to_frame(rows: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    """Re-express [x, y, theta, ...] rows in the frame at origin/heading."""
    c, s = math.cos(-heading), math.sin(-heading)
    out = rows.copy()
    dx, dy = rows[:, 0] - origin[0], rows[:, 1] - origin[1]
    out[:, 0] = c * dx - s * dy
    out[:, 1] = s * dx + c * dy
    out[:, 2] = wrap_angle(rows[:, 2] - heading)
    return out


def _offset_curve(ego_rows: np.ndarray, offset: float) -> np.ndarray:
    """Map polyline as a lateral offset of the ego path, with [x,y,theta,kappa]."""
    theta = ego_rows[:, 2]
    x = ego_rows[:, 0] - offset * np.sin(theta)
    y = ego_rows[:, 1] + offset * np.cos(theta)
    return np.column_stack([x, y, theta, ego_rows[:, 3]])


def _relative_sequence(dst_rows: np.ndarray, src_rows: np.ndarray) -> np.ndarray:
    rel = dst_rows[:, :4] - src_rows[:, :4]
    rel[:, 2] = wrap_angle(rel[:, 2])
    return rel


def generate_scene(arch: ArchetypeSpec, spec: WorldSpec, rng: np.random.Generator):
    """One procedural scene graph plus its semantic labels."""
    t_len = spec.t_len
    steps = np.arange(t_len)

    v0 = arch.speed * float(rng.uniform(0.85, 1.15))
    v_end = v0 if arch.speed_end is None else arch.speed_end * float(rng.uniform(0.8, 1.2))
    v = np.clip(np.linspace(v0, v_end, t_len) + rng.normal(0, 0.05 * max(v0, 1.0), t_len), 0.0, None)
    kappa = arch.curvature * float(rng.uniform(0.85, 1.15)) + arch.curvature_wobble * np.sin(
        2.0 * math.pi * steps / t_len + rng.uniform(0, 2 * math.pi)
    )
    ego_raw = _integrate(v, kappa)

    agents_raw = []
    n_agents = min(int(rng.poisson(arch.agent_rate)), 6)
    for _ in range(n_agents):
        lateral = float(rng.choice([-7.0, -3.5, 3.5, 7.0]) + rng.normal(0, 0.5))
        longitudinal = float(rng.uniform(-20.0, 25.0))
        opposite = bool(rng.random() < 0.3)
        heading = math.pi if opposite else 0.0
        speed = max(0.0, float(arch.speed * rng.uniform(0.5, 1.2)))
        ak = float(rng.normal(0, 0.02))
        av = np.full(t_len, speed) + rng.normal(0, 0.1, t_len)
        agents_raw.append(
            _integrate(np.clip(av, 0, None), np.full(t_len, ak), longitudinal, lateral,
                       heading + float(rng.normal(0, 0.1)))
        )
    if arch.crossing:
        # one pedestrian moving transversally across the road ahead
        px = float(rng.uniform(4.0, 12.0))
        ped = _integrate(np.full(t_len, 1.4), np.zeros(t_len), px, -6.0, math.pi / 2.0)
        agents_raw.append(ped)

    current = spec.t_hist - 1
    origin, heading = ego_raw[current, :2], ego_raw[current, 2]
    ego = _to_frame(ego_raw, origin, heading)
    ego[:, 2] = wrap_angle(ego[:, 2])
    agents = [_to_frame(a, origin, heading) for a in agents_raw]

    maps_raw = [
        (NodeKind.MAP_DIVIDER, _offset_curve(ego_raw, 1.75)),
        (NodeKind.MAP_BOUNDARY, _offset_curve(ego_raw, 5.25)),
        (NodeKind.MAP_BOUNDARY, _offset_curve(ego_raw, -5.25)),
    ]
    if arch.crossing:
        px = float(rng.uniform(3.0, 10.0))
        span = np.linspace(-6.0, 6.0, t_len)
        cross = np.column_stack(
            [np.full(t_len, px), span, np.full(t_len, math.pi / 2.0), np.zeros(t_len)]
        )
        maps_raw.append((NodeKind.MAP_PED_CROSSING, cross))
    map_nodes = [(kind, _to_frame(rows, origin, heading)) for kind, rows in maps_raw]

    nodes = [Node(NodeKind.EGO, ego)]
    nodes += [Node(NodeKind.DYNAMIC_AGENT, a) for a in agents]
    nodes += [Node(kind, rows) for kind, rows in map_nodes]
    ego_idx = 0
    agent_idx = list(range(1, 1 + len(agents)))
    map_idx = list(range(1 + len(agents), len(nodes)))

    edges = []
    for i in range(1, len(nodes)):
        edges.append(
            DirectedEdge(
                EdgeKind.ALL_TO_EGO, i, ego_idx,
                _relative_sequence(nodes[ego_idx].sequence, nodes[i].sequence),
            )
        )
    for pos, i in enumerate(agent_idx):
        dists = [
            (float(np.linalg.norm(nodes[i].sequence[:, :2] - nodes[j].sequence[:, :2], axis=1).mean()), j)
            for j in agent_idx
            if j != i
        ]
        for dist, j in sorted(dists)[:2]:
            if dist < 25.0:
                edges.append(
                    DirectedEdge(
                        EdgeKind.DYNAMIC_TO_DYNAMIC, j, i,
                        _relative_sequence(nodes[i].sequence, nodes[j].sequence),
                    )
                )
    for m in map_idx:
        if not agent_idx:
            break
        dists = [
            (float(np.linalg.norm(nodes[m].sequence[:, :2] - nodes[j].sequence[:, :2], axis=1).mean()), j)
            for j in agent_idx
        ]
        dist, j = min(dists)
        if dist < 30.0:
            edges.append(
                DirectedEdge(
                    EdgeKind.MAP_TO_DYNAMIC, m, j,
                    _relative_sequence(nodes[j].sequence, nodes[m].sequence),
                )
            )

    graph = SceneGraph(tuple(nodes), tuple(edges), t_len, spec.t_hist, spec.t_fut)

    future_v = ego[spec.t_hist :, 4]
    net_turn = float(np.sum(np.diff(ego_raw[:, 2])))
    if future_v.size and float(future_v.mean()) < 1.0:
        command = Command.STOP
    elif net_turn > 0.35:
        command = Command.LEFT
    elif net_turn < -0.35:
        command = Command.RIGHT
    else:
        command = Command.STRAIGHT
    overlap = False
    for a in agents:
        if float(np.linalg.norm(ego[:, :2] - a[:, :2], axis=1).min()) < 2.5:
            overlap = True
            break
    if not overlap and arch.crossing:
        cross_rows = map_nodes[-1][1]
        d = np.linalg.norm(ego[:, None, :2] - cross_rows[None, :, :2], axis=2)
        overlap = bool(d.min() < 2.0)
    labels = SemanticLabels(command, overlap)
    return graph, labels


def _synthesize_subscores(arch: ArchetypeSpec, rng: np.random.Generator) -> SubscoreVector:
    difficulty = 1.0 - arch.base_score
    gates = {
        name: 1.0 if rng.random() > 0.2 * difficulty else float(rng.uniform(0.0, 0.5))
        for name in ("nc", "dac", "ddc", "tlc")
    }
    soft = {
        name: float(np.clip(rng.normal(1.0 - 0.5 * difficulty, 0.15), 0.0, 1.0))
        for name in ("ep", "ttc", "lk", "hc", "ec", "comf")
    }
    return SubscoreVector(**gates, **soft)


# --- world -------------------------------------------------------------------


@dataclass
class World:
    """Generated datasets plus the hidden per-token archetype map. The hidden
    state lives only here and in the oracle, never in the Dataset objects."""

    spec: WorldSpec
    real: Dataset
    syn_pool: Dataset
    cal: Dataset
    archetype_of: dict[str, int] = field(repr=False, default_factory=dict)
    difficulty_of: dict[str, float] = field(repr=False, default_factory=dict)
    m0: np.ndarray = field(repr=False, default=None)

    @classmethod
    def generate(cls, spec: WorldSpec) -> "World":
        tag = f"{stable_hash(spec.generative_fingerprint()) & 0xFFFFFF:06x}"
        archetype_of: dict[str, int] = {}

        def make_dataset(counts: Sequence[int], provenance: Provenance, label: str) -> Dataset:
            total = int(sum(counts))
            order = derive_rng(spec.seed, "ids", label).permutation(total)
            d = Dataset()
            flat = [k for k, c in enumerate(counts) for _ in range(c)]
            for serial, arch_idx in enumerate(flat):
                token_id = f"{tag}-{label}-{order[serial]:06d}"
                rng = derive_rng(spec.seed, "scene", label, serial)
                graph, labels = generate_scene(spec.archetypes[arch_idx], spec, rng)
                d.tokens.append(SceneToken(token_id, provenance))
                d.graphs[token_id] = graph
                d.labels[token_id] = labels
                archetype_of[token_id] = arch_idx
            d.tokens.sort(key=lambda t: t.id)
            return d

        real = make_dataset([a.real_count for a in spec.archetypes], Provenance.REAL, "real")
        syn_full = make_dataset([a.syn_count for a in spec.archetypes], Provenance.SYNTHETIC, "syn")

        metric_rng = derive_rng(spec.seed, "metrics")
        for token in real.tokens:
            if metric_rng.random() < spec.metric_fraction:
                real.metrics[token.id] = _synthesize_subscores(
                    spec.archetypes[archetype_of[token.id]], metric_rng
                )

        cal, syn_pool = split_calibration(
            syn_full, spec.cal_fraction,
            {t: archetype_of[t] for t in syn_full.token_ids()},
            seed=spec.seed,
        )
        diff_rng = derive_rng(spec.seed, "difficulty")
        difficulty_of = {
            t: float(diff_rng.normal(0.0, spec.scene_sigma)) for t in sorted(archetype_of)
        }
        m0 = np.maximum([a.real_count for a in spec.archetypes], spec.m0_floor).astype(float)
        return cls(spec=spec, real=real, syn_pool=syn_pool, cal=cal,
                   archetype_of=archetype_of, difficulty_of=difficulty_of, m0=m0)


def generate_world(spec: WorldSpec) -> tuple[Dataset, Dataset, Dataset]:
    world = World.generate(spec)
    return world.real, world.syn_pool, world.cal


# --- oracle ------------------------------------------------------------------


@dataclass(frozen=True)
class OracleHandle:
    counts: tuple[int, ...]  # training tokens per archetype
    syn_counts: tuple[int, ...]
    fingerprint: int


class GroundTruthOracle:
    """PolicyOracle over a generated world.

    Per archetype k the mean response is
    clip(a_k + sum_j T_kj b_j log(1 + m_j / m0_j) + g r_k, 0, 1) with m_j the
    training count in archetype j and r_k its synthetic share; per-scene
    scores add Gaussian noise, clip, and average over ``eval_draws`` draws.
    Deterministic given the world seed and the training set.
    """

    def __init__(self, world: World, response_spec: WorldSpec | None = None):
        self.world = world
        self.spec = response_spec or world.spec
        if self.spec.k != world.spec.k:
            raise HarnessError("response spec archetype count differs from the world's")
        self._transfer = self.spec.transfer_matrix()

    def train(self, token_ids) -> OracleHandle:
        counts = np.zeros(self.world.spec.k, dtype=int)
        syn_counts = np.zeros(self.world.spec.k, dtype=int)
        syn_ids = set(self.world.syn_pool.graphs)
        for token_id in token_ids:
            arch = self.world.archetype_of.get(token_id)
            if arch is None:
                raise HarnessError(f"token {token_id!r} does not belong to this world")
            counts[arch] += 1
            if token_id in syn_ids:
                syn_counts[arch] += 1
        return OracleHandle(
            counts=tuple(counts.tolist()),
            syn_counts=tuple(syn_counts.tolist()),
            fingerprint=stable_hash(sorted(token_ids)),
        )

    def archetype_scores(self, handle: OracleHandle) -> np.ndarray:
        spec = self.spec
        m = np.asarray(handle.counts, dtype=float)
        syn = np.asarray(handle.syn_counts, dtype=float)
        a = np.array([x.base_score for x in spec.archetypes])
        b = np.array([x.data_return for x in spec.archetypes])
        ratio = np.divide(syn, np.maximum(m, 1.0))
        growth = self._transfer @ (b * np.log1p(m / self.world.m0))
        return np.clip(a + growth + spec.synth_ratio_coeff * ratio, 0.0, 1.0)

    def evaluate(self, handle: OracleHandle, cal: Dataset) -> dict[str, float]:
        base = self.archetype_scores(handle)
        rng = derive_rng(self.world.spec.seed, "evaluate", handle.fingerprint)
        ids = sorted(cal.graphs)
        archs, offsets = [], []
        for token_id in ids:
            arch = self.world.archetype_of.get(token_id)
            if arch is None:
                raise HarnessError(f"token {token_id!r} does not belong to this world")
            archs.append(arch)
            offsets.append(self.world.difficulty_of[token_id])
        noise = rng.normal(0.0, self.world.spec.noise_sigma, size=(len(ids), self.spec.eval_draws))
        center = base[archs] + np.asarray(offsets)
        means = np.clip(center[:, None] + noise, 0.0, 1.0).mean(axis=1)
        return {token_id: float(score) for token_id, score in zip(ids, means)}


def oracle_pair(spec_a: WorldSpec, spec_b: WorldSpec) -> tuple[GroundTruthOracle, GroundTruthOracle]:
    """Two oracles over one shared scene world; the specs must agree on every
    generative field and may differ only in response parameters."""
    if spec_a.generative_fingerprint() != spec_b.generative_fingerprint():
        raise HarnessError("oracle_pair specs must share identical generative parameters")
    world = World.generate(spec_a)
    return GroundTruthOracle(world, spec_a), GroundTruthOracle(world, spec_b)


def divergent_response_pair(
    spec: WorldSpec, weak_score: float = 0.32, strong_score: float = 0.72
) -> tuple[WorldSpec, WorldSpec]:
    """Spec pair with disjoint weak archetype sets: A is weak on the even
    archetype indices, B on the odd ones."""
    if spec.k < 2:
        raise HarnessError("divergent pair needs at least 2 archetypes")

    def reshape(weak_on_even: bool) -> WorldSpec:
        archetypes = tuple(
            replace(a, base_score=weak_score if (i % 2 == 0) == weak_on_even else strong_score)
            for i, a in enumerate(spec.archetypes)
        )
        return replace(spec, archetypes=archetypes)

    return reshape(True), reshape(False)


# --- fast descriptor embeddings ------------------------------------------------


def _scene_descriptor(graph: SceneGraph) -> np.ndarray:
    ego = graph.nodes[graph.ego_index].sequence
    v, kappa, theta = ego[:, 4], ego[:, 3], ego[:, 2]
    dtheta = np.diff(np.unwrap(theta))
    pos = ego[:, :2]
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)

    agents = [n.sequence for n in graph.nodes if n.kind is NodeKind.DYNAMIC_AGENT]
    if agents:
        dists = [np.linalg.norm(a[:, :2] - pos, axis=1) for a in agents]
        min_dists = np.array([d.min() for d in dists])
        agent_speed = float(np.mean([a[:, 4].mean() for a in agents]))
        opposite = float(np.mean([abs(wrap_angle(a[0, 2])) > math.pi / 2 for a in agents]))
        agent_feats = [len(agents), min_dists.mean(), min_dists.min(), agent_speed, opposite]
    else:
        agent_feats = [0.0, 60.0, 60.0, 0.0, 0.0]

    kinds = [n.kind for n in graph.nodes]
    crossings = [n.sequence for n in graph.nodes if n.kind is NodeKind.MAP_PED_CROSSING]
    if crossings:
        cross_min = min(
            float(np.linalg.norm(pos[:, None, :] - c[None, :, :2], axis=2).min()) for c in crossings
        )
    else:
        cross_min = 60.0

    return np.array(
        [
            v.mean(), v.std(), v[-1], v.min(),
            kappa.mean(), np.abs(kappa).mean(), kappa.std(), np.abs(kappa).max(),
            dtheta.sum(), np.abs(dtheta).sum(),
            seg.sum(), float(np.linalg.norm(pos[-1] - pos[0])), float(np.abs(pos[:, 1]).max()),
            *agent_feats,
            float(kinds.count(NodeKind.MAP_PED_CROSSING)),
            float(kinds.count(NodeKind.MAP_DIVIDER)),
            float(kinds.count(NodeKind.MAP_BOUNDARY)),
            cross_min,
            len(graph.edges) / 10.0,
            float((v[1:] - v[:-1]).mean()),
        ]
    )


def descriptor_embeddings(*datasets: Dataset) -> dict[str, np.ndarray]:
    """Deterministic geometric scene descriptors, jointly standardized over
    all given datasets and l2-normalized. A fast stand-in for trained
    embeddings at desk scale; archetype identity is only implicit in the
    geometry, exactly as it would be for a learned encoder.
    """
    ids, rows = [], []
    for d in datasets:
        for token_id in sorted(d.graphs):
            ids.append(token_id)
            rows.append(_scene_descriptor(d.graphs[token_id]))
    x = np.asarray(rows)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-9] = 1.0
    x = (x - mean) / std
    norms = np.linalg.norm(x, axis=1)
    norms[norms == 0] = 1.0
    x = x / norms[:, None]
    return dict(zip(ids, x))
