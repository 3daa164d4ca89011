"""Core domain types for driving scenes, datasets, tokens, and budgets.

All types are immutable after construction (arrays are marked read-only), so
they are safe to share across threads; validation and splitting are pure.

Datasets serialize to JSONL, one record per token, floats at full precision
(``json`` emits ``repr`` floats, which round-trip float64 bit-exactly).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from autoscale.driving_metrics import SubscoreVector
from autoscale.rng import derive_rng


class Provenance(str, Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"
    CALIBRATION = "calibration"


class NodeKind(str, Enum):
    EGO = "ego"
    DYNAMIC_AGENT = "dynamic_agent"
    MAP_PED_CROSSING = "map_ped_crossing"
    MAP_DIVIDER = "map_divider"
    MAP_BOUNDARY = "map_boundary"


DYNAMIC_NODE_KINDS = frozenset({NodeKind.EGO, NodeKind.DYNAMIC_AGENT})
MAP_NODE_KINDS = frozenset(
    {NodeKind.MAP_PED_CROSSING, NodeKind.MAP_DIVIDER, NodeKind.MAP_BOUNDARY}
)

# dynamic rows are [x, y, theta, kappa, nu]; map rows drop nu
DYNAMIC_ROW_WIDTH = 5
MAP_ROW_WIDTH = 4


def node_row_width(kind: NodeKind) -> int:
    return DYNAMIC_ROW_WIDTH if kind in DYNAMIC_NODE_KINDS else MAP_ROW_WIDTH


class EdgeKind(str, Enum):
    MAP_TO_DYNAMIC = "map_to_dynamic"
    DYNAMIC_TO_DYNAMIC = "dynamic_to_dynamic"
    ALL_TO_EGO = "all_to_ego"


class Command(str, Enum):
    STRAIGHT = "straight"
    LEFT = "left"
    RIGHT = "right"
    STOP = "stop"


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SceneToken:
    id: str
    provenance: Provenance


@dataclass(frozen=True)
class Node:
    kind: NodeKind
    sequence: np.ndarray  # (t_len, 5) for dynamic kinds, (t_len, 4) for map kinds

    def __post_init__(self):
        object.__setattr__(self, "sequence", _frozen_array(self.sequence))


@dataclass(frozen=True)
class DirectedEdge:
    kind: EdgeKind
    src: int
    dst: int
    sequence: np.ndarray  # (t_len, 4): per-step [dx, dy, dtheta, dkappa]

    def __post_init__(self):
        object.__setattr__(self, "sequence", _frozen_array(self.sequence))


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[Node, ...]
    edges: tuple[DirectedEdge, ...]
    t_len: int
    t_hist: int
    t_fut: int

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def ego_index(self) -> int:
        for i, node in enumerate(self.nodes):
            if node.kind is NodeKind.EGO:
                return i
        raise ValueError("scene graph has no ego node")


@dataclass(frozen=True)
class SemanticLabels:
    command: Command
    overlap: bool

    def joint(self) -> str:
        """Joint (command, overlap) label used by contrastive supervision."""
        return f"{self.command.value}|{int(self.overlap)}"


@dataclass(frozen=True)
class Budget:
    b: int
    n_total: int

    def __post_init__(self):
        if self.b < 0:
            raise ValueError("budget must be nonnegative")
        if self.n_total < self.b:
            raise ValueError("n_total must cover the budget")

    @classmethod
    def for_real_count(cls, n0: int, b: int) -> "Budget":
        return cls(b=b, n_total=n0 + b)

    @property
    def n0(self) -> int:
        return self.n_total - self.b


@dataclass
class Dataset:
    tokens: list[SceneToken] = field(default_factory=list)
    graphs: dict[str, SceneGraph] = field(default_factory=dict)
    labels: dict[str, SemanticLabels] = field(default_factory=dict)
    metrics: dict[str, SubscoreVector] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tokens)

    def token_ids(self) -> list[str]:
        return [t.id for t in self.tokens]

    def count(self, provenance: Provenance) -> int:
        return sum(1 for t in self.tokens if t.provenance is provenance)

    @property
    def n0(self) -> int:
        return self.count(Provenance.REAL)

    def subset(self, ids: Iterable[str], provenance: Provenance | None = None) -> "Dataset":
        wanted = set(ids)
        tokens = []
        for t in self.tokens:
            if t.id in wanted:
                tokens.append(t if provenance is None else SceneToken(t.id, provenance))
        return Dataset(
            tokens=tokens,
            graphs={t.id: self.graphs[t.id] for t in tokens if t.id in self.graphs},
            labels={t.id: self.labels[t.id] for t in tokens if t.id in self.labels},
            metrics={t.id: self.metrics[t.id] for t in tokens if t.id in self.metrics},
        )


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str):
        self.violations.append(message)


def _validate_graph(token_id: str, g: SceneGraph, report: ValidationReport):
    if g.t_hist + g.t_fut != g.t_len:
        report.add(f"{token_id}: t_hist + t_fut = {g.t_hist + g.t_fut} != t_len {g.t_len}")
    ego_count = sum(1 for n in g.nodes if n.kind is NodeKind.EGO)
    if ego_count != 1:
        report.add(f"{token_id}: expected exactly one ego node, found {ego_count}")
    for i, node in enumerate(g.nodes):
        seq = node.sequence
        width = node_row_width(node.kind)
        if seq.ndim != 2 or seq.shape != (g.t_len, width):
            report.add(
                f"{token_id}: node {i} ({node.kind.value}) has shape "
                f"{tuple(seq.shape)}, expected ({g.t_len}, {width})"
            )
            continue
        if not np.all(np.isfinite(seq)):
            report.add(f"{token_id}: node {i} has non-finite values")
            continue
        theta = seq[:, 2]
        if np.any(theta > np.pi) or np.any(theta <= -np.pi):
            report.add(f"{token_id}: node {i} heading not wrapped to (-pi, pi]")
    n_nodes = len(g.nodes)
    for j, edge in enumerate(g.edges):
        if not (0 <= edge.src < n_nodes and 0 <= edge.dst < n_nodes):
            report.add(f"{token_id}: edge {j} endpoint out of range")
            continue
        src_kind = g.nodes[edge.src].kind
        dst_kind = g.nodes[edge.dst].kind
        if edge.kind is EdgeKind.ALL_TO_EGO and dst_kind is not NodeKind.EGO:
            report.add(f"{token_id}: edge {j} all_to_ego must end at the ego node")
        if edge.kind is EdgeKind.MAP_TO_DYNAMIC and not (
            src_kind in MAP_NODE_KINDS and dst_kind in DYNAMIC_NODE_KINDS
        ):
            report.add(f"{token_id}: edge {j} map_to_dynamic endpoint kinds invalid")
        if edge.kind is EdgeKind.DYNAMIC_TO_DYNAMIC and not (
            src_kind is NodeKind.DYNAMIC_AGENT and dst_kind is NodeKind.DYNAMIC_AGENT
        ):
            report.add(f"{token_id}: edge {j} dynamic_to_dynamic endpoint kinds invalid")
        seq = edge.sequence
        if seq.ndim != 2 or seq.shape != (g.t_len, 4):
            report.add(f"{token_id}: edge {j} has shape {tuple(seq.shape)}, expected ({g.t_len}, 4)")
        elif not np.all(np.isfinite(seq)):
            report.add(f"{token_id}: edge {j} has non-finite values")


def validate_dataset(d: Dataset) -> ValidationReport:
    """Collect every invariant violation; an empty report means valid."""
    report = ValidationReport()
    seen: dict[str, Provenance] = {}
    for token in d.tokens:
        if token.id in seen:
            kinds = {seen[token.id], token.provenance}
            if Provenance.CALIBRATION in kinds and kinds & {Provenance.REAL, Provenance.SYNTHETIC}:
                report.add(
                    f"calibration token id {token.id!r} also appears in the "
                    f"{(kinds - {Provenance.CALIBRATION}).pop().value} pool"
                )
            else:
                report.add(f"duplicate token id {token.id!r}")
        else:
            seen[token.id] = token.provenance
    for token in d.tokens:
        graph = d.graphs.get(token.id)
        if graph is None:
            report.add(f"token {token.id!r} has no scene graph")
        else:
            _validate_graph(token.id, graph, report)
    return report


def split_calibration(
    pool: Dataset,
    fraction: float,
    cluster_ids: Mapping[str, object],
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Cluster-stratified split of ``pool`` into (calibration, remainder).

    Per-cluster counts are floored, then the leftover global quota (nearest
    integer to fraction * |pool|) goes to the clusters with the largest
    fractional remainders, ties broken by cluster id. Calibration tokens are
    re-tagged with Calibration provenance; the split partitions the pool by id.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    missing = [t.id for t in pool.tokens if t.id not in cluster_ids]
    if missing:
        raise ValueError(f"cluster_ids missing {len(missing)} pool tokens, e.g. {missing[0]!r}")

    by_cluster: dict[object, list[str]] = {}
    for token in pool.tokens:
        by_cluster.setdefault(cluster_ids[token.id], []).append(token.id)
    clusters = sorted(by_cluster, key=repr)

    total_quota = int(round(fraction * len(pool.tokens)))
    base, remainders = {}, []
    for c in clusters:
        exact = fraction * len(by_cluster[c])
        base[c] = math.floor(exact)
        remainders.append((-(exact - base[c]), repr(c), c))
    leftover = total_quota - sum(base.values())
    for _, _, c in sorted(remainders):
        if leftover <= 0:
            break
        if base[c] < len(by_cluster[c]):
            base[c] += 1
            leftover -= 1

    rng = derive_rng(seed, "split_calibration")
    cal_ids: set[str] = set()
    for c in clusters:
        ids = sorted(by_cluster[c])
        order = rng.permutation(len(ids))
        cal_ids.update(ids[i] for i in order[: base[c]])

    calibration = pool.subset(cal_ids, provenance=Provenance.CALIBRATION)
    remainder = pool.subset(set(pool.token_ids()) - cal_ids)
    return calibration, remainder


# --- JSONL serialization -----------------------------------------------------


def _token_record(d: Dataset, token: SceneToken) -> dict:
    g = d.graphs[token.id]
    labels = d.labels.get(token.id)
    metrics = d.metrics.get(token.id)
    return {
        "id": token.id,
        "provenance": token.provenance.value,
        "t_len": g.t_len,
        "t_hist": g.t_hist,
        "t_fut": g.t_fut,
        "nodes": [{"kind": n.kind.value, "sequence": n.sequence.tolist()} for n in g.nodes],
        "edges": [
            {"kind": e.kind.value, "src": e.src, "dst": e.dst, "sequence": e.sequence.tolist()}
            for e in g.edges
        ],
        "labels": (
            {"command": labels.command.value, "overlap": labels.overlap} if labels else None
        ),
        "metrics": metrics.as_dict() if metrics else None,
    }


def write_jsonl(d: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for token in d.tokens:
            fh.write(json.dumps(_token_record(d, token), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> Dataset:
    dataset = Dataset()
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON record: {exc}") from exc
            token = SceneToken(rec["id"], Provenance(rec["provenance"]))
            nodes = tuple(
                Node(NodeKind(n["kind"]), np.array(n["sequence"], dtype=float))
                for n in rec["nodes"]
            )
            edges = tuple(
                DirectedEdge(
                    EdgeKind(e["kind"]), e["src"], e["dst"], np.array(e["sequence"], dtype=float)
                )
                for e in rec["edges"]
            )
            dataset.tokens.append(token)
            dataset.graphs[token.id] = SceneGraph(
                nodes, edges, rec["t_len"], rec["t_hist"], rec["t_fut"]
            )
            if rec.get("labels"):
                dataset.labels[token.id] = SemanticLabels(
                    Command(rec["labels"]["command"]), bool(rec["labels"]["overlap"])
                )
            if rec.get("metrics"):
                dataset.metrics[token.id] = SubscoreVector.from_dict(rec["metrics"])
    return dataset


def merge(*datasets: Dataset) -> Dataset:
    out = Dataset()
    for d in datasets:
        out.tokens.extend(d.tokens)
        out.graphs.update(d.graphs)
        out.labels.update(d.labels)
        out.metrics.update(d.metrics)
    return out
