"""Closed-loop data-mixture optimization for real/synthetic co-training.

The package wires together scene representation (graph autoencoder
embeddings), embedding-space clustering, a mixture-to-score surrogate
optimized by exponentiated gradient ascent, token-level retrieval, and a
simulated train/evaluate oracle, plus reference selectors (uniform, IWR,
Chameleon) for head-to-head comparison.
"""

__version__ = "0.1.0"

from autoscale.scenes import (
    Budget,
    Dataset,
    DirectedEdge,
    Node,
    SceneGraph,
    SceneToken,
    SemanticLabels,
    validate_dataset,
    split_calibration,
)
from autoscale.driving_metrics import SubscoreVector, pdms, epdms, jaccard
from autoscale.engine import EngineConfig, RoundRecord, run, swap_experiment

__all__ = [
    "Budget",
    "Dataset",
    "DirectedEdge",
    "EngineConfig",
    "Node",
    "RoundRecord",
    "SceneGraph",
    "SceneToken",
    "SemanticLabels",
    "SubscoreVector",
    "epdms",
    "jaccard",
    "pdms",
    "run",
    "split_calibration",
    "swap_experiment",
    "validate_dataset",
]
