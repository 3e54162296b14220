"""Manifold-aware re-ranking for instance retrieval.

Stages: k-NN graph ensemble and collaborative diffusion (:mod:`lpmt.bcd`),
locality state embedding (:mod:`lpmt.lse`), and transition distances
between the embedded distributions (:mod:`lpmt.tmt`).
"""

__version__ = "0.1.0"

from .core import FeatureSet, PipelineConfig, Ranking, euclidean_distance_matrix, ground_cost
from .evaluation import GroundTruth, MetricReport, evaluate, generate_manifold
from .pipeline import RerankResult, baseline, rerank

__all__ = [
    "FeatureSet",
    "GroundTruth",
    "MetricReport",
    "PipelineConfig",
    "Ranking",
    "RerankResult",
    "baseline",
    "euclidean_distance_matrix",
    "evaluate",
    "generate_manifold",
    "ground_cost",
    "rerank",
]
