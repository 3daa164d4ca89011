"""Driving-score formulas and analysis statistics.

Subscores are inputs (synthesized by the harness or read from dataset files);
nothing here computes them from trajectories.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, fields

import numpy as np

logger = logging.getLogger(__name__)

SUBSCORE_FIELDS = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc", "ec", "comf")


@dataclass(frozen=True)
class SubscoreVector:
    """Per-scene driving metric components, each in [0, 1].

    ``comf`` feeds only the PDMS aggregate; ``ddc``/``tlc``/``lk``/``hc``/``ec``
    only the EPDMS aggregate.
    """

    nc: float
    dac: float
    ddc: float
    tlc: float
    ep: float
    ttc: float
    lk: float
    hc: float
    ec: float
    comf: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValueError(f"subscore {f.name}={v!r} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in SUBSCORE_FIELDS], dtype=float)

    def as_dict(self) -> dict[str, float]:
        return {n: float(getattr(self, n)) for n in SUBSCORE_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "SubscoreVector":
        return cls(**{n: float(d[n]) for n in SUBSCORE_FIELDS})


def pdms(s: SubscoreVector) -> float:
    """Multiplicative-gated driving score: NC*DAC*(5EP + 5TTC + 2Comf)/12."""
    return s.nc * s.dac * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.comf) / 12.0


def epdms(s: SubscoreVector) -> float:
    """Extended score: NC*DAC*DDC*TLC*(5EP + 5TTC + 2LK + 2HC + 2EC)/16."""
    gate = s.nc * s.dac * s.ddc * s.tlc
    return gate * (5.0 * s.ep + 5.0 * s.ttc + 2.0 * s.lk + 2.0 * s.hc + 2.0 * s.ec) / 16.0


def jaccard(a, b) -> float:
    """|A n B| / |A u B| over token sets; both empty -> 1.0 (flagged)."""
    a, b = set(a), set(b)
    if not a and not b:
        warnings.warn("jaccard of two empty sets defined as 1.0", stacklevel=2)
        return 1.0
    return len(a & b) / len(a | b)


def r_squared(predicted, actual) -> float:
    """Coefficient of determination 1 - SSE/SST."""
    predicted = np.asarray(predicted, dtype=float)
    actual = np.asarray(actual, dtype=float)
    if actual.size < 2:
        raise ValueError("r_squared needs at least 2 samples")
    sst = float(np.sum((actual - actual.mean()) ** 2))
    if sst == 0.0:
        raise ValueError("r_squared undefined for zero target variance")
    sse = float(np.sum((actual - predicted) ** 2))
    return 1.0 - sse / sst


def propagation_gain(pairs, similarity, lambda_reg: float) -> tuple[float, float]:
    """In-sample R^2 of the score-delta predictor fit with the cluster-similarity
    kernel versus the identity matrix (no cross-cluster propagation), on the
    same regression rows.
    """
    from autoscale import mixture

    r = np.asarray(similarity.r if hasattr(similarity, "r") else similarity, dtype=float)
    identity = np.eye(r.shape[0])
    out = []
    for mat in (r, identity):
        params = mixture.fit_predictor(pairs, mat, lambda_reg)
        x, y, _ = mixture.pair_design_matrix(pairs, mat)
        phi = np.concatenate([params.beta, [params.gamma]])
        out.append(r_squared(x @ phi, y))
    return out[0], out[1]
