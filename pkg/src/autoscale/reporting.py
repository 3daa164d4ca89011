"""CSV reporting over round logs, selections, and embeddings.

RFC-4180 quoting via the csv module; floats at 9 significant digits. Report
functions only read their inputs.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from autoscale import mixture
from autoscale.clustering import ClusterModel, PcaReducer
from autoscale.engine import RoundRecord
from autoscale.retrieval import RankedCandidate


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".9g")
    return str(value)


def _write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_rounds_csv(records: Sequence[RoundRecord], path) -> Path:
    return _write_csv(path, ["round", "overall"], ((r.round, r.overall) for r in records))


def write_clusters_csv(records: Sequence[RoundRecord], n0, n_total: int, path) -> Path:
    """Per (round, cluster): mixture weight, mean score, synthetic ratio,
    gain, and augmentation size, the last two recomputed from the logged
    mixture through the public mixture ops."""
    n0 = np.asarray(n0, dtype=int)
    rows = []
    for rec in records:
        w = np.asarray(rec.mixture, dtype=float)
        ratios = mixture.synthetic_ratio(w, n0, n_total)
        deltas = mixture.augmentation_sizes(w, n0, n_total) if rec.round > 0 else np.zeros_like(n0)
        s_bar = rec.cluster_scores["s_bar"]
        for k in range(len(w)):
            alpha = rec.gains[k] if rec.gains is not None else None
            rows.append(
                (rec.round, k, float(w[k]), s_bar[k], float(ratios[k]), alpha, int(deltas[k]))
            )
    return _write_csv(path, ["round", "cluster", "w", "s_bar", "r", "alpha", "delta"], rows)


def write_log_selection_csv(records: Sequence[RoundRecord], path) -> Path:
    rows = ((rec.round, token) for rec in records for token in rec.selected)
    return _write_csv(path, ["round", "token_id"], rows)


def write_selection_csv(candidates: Sequence[RankedCandidate], method: str, path) -> Path:
    """Ranked selection in the shared selector schema."""
    rows = (
        (method, rank, c.token_id, c.priority, c.best_anchor_id, c.anchor_cluster)
        for rank, c in enumerate(candidates, start=1)
    )
    return _write_csv(
        path, ["method", "rank", "token_id", "priority", "best_anchor_id", "anchor_cluster"], rows
    )


def write_projection_csv(
    embeddings: Mapping[str, np.ndarray],
    assignments: Mapping[str, int],
    path,
) -> Path:
    """2-D PCA projection of all embeddings with cluster ids (the package's
    stand-in for embedding-space scatter figures)."""
    ids = sorted(embeddings)
    x = np.asarray([embeddings[t] for t in ids], dtype=float)
    proj = PcaReducer(n_components=2).fit(x).transform(x)
    rows = (
        (t, float(p[0]), float(p[1]), assignments.get(t)) for t, p in zip(ids, proj)
    )
    return _write_csv(path, ["token_id", "x", "y", "cluster"], rows)


def write_report(
    records: Sequence[RoundRecord],
    model: ClusterModel,
    out_dir,
    embeddings: Mapping[str, np.ndarray] | None = None,
    assignments: Mapping[str, int] | None = None,
    budget: int | None = None,
) -> list[Path]:
    """Emit rounds.csv, clusters.csv, selection.csv, and (when embeddings are
    given) projection.csv under ``out_dir``."""
    out_dir = Path(out_dir)
    if budget is None:
        budget = max((len(r.selected) for r in records), default=0)
    n_total = int(np.asarray(model.n0).sum()) + budget
    written = [
        write_rounds_csv(records, out_dir / "rounds.csv"),
        write_clusters_csv(records, model.n0, n_total, out_dir / "clusters.csv"),
        write_log_selection_csv(records, out_dir / "selection.csv"),
    ]
    if embeddings is not None:
        written.append(
            write_projection_csv(embeddings, assignments or {}, out_dir / "projection.csv")
        )
    return written
