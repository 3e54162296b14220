"""Feature containers, Euclidean geometry and the pipeline configuration."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.spatial.distance import pdist, squareform

SIGMA_GLOBAL_MEAN_KNN = "global-mean-knn"


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """An ``n x d`` feature matrix whose rows are aligned with ``ids``.

    Data is widened to float64 and frozen (read-only) on construction.
    """

    ids: tuple
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got shape {data.shape}")
        n, d = data.shape
        if n < 1 or d < 1:
            raise ValueError(f"feature data must have n >= 1 and d >= 1, got {data.shape}")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != n:
            raise ValueError(f"{len(ids)} ids given for {n} rows")
        if len(set(ids)) != n:
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise ValueError(f"duplicate instance id {dup!r}")
        bad = ~np.isfinite(data)
        if bad.any():
            row = int(np.argwhere(bad)[0, 0])
            raise ValueError(f"non-finite feature value in row {row} (id {ids[row]!r})")
        data.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data, ids: Optional[Sequence] = None) -> "FeatureSet":
        data = np.asarray(data)
        if ids is None:
            ids = [str(i) for i in range(data.shape[0])]
        return cls(tuple(ids), data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def index_of(self, ident) -> int:
        try:
            return self._index[str(ident)]
        except KeyError:
            raise KeyError(f"unknown instance id {ident!r}") from None

    @property
    def _index(self) -> dict:
        cached = self.__dict__.get("_index_cache")
        if cached is None:
            cached = {ident: i for i, ident in enumerate(self.ids)}
            object.__setattr__(self, "_index_cache", cached)
        return cached

    def subset(self, indices) -> "FeatureSet":
        indices = np.asarray(indices, dtype=np.intp)
        return FeatureSet(tuple(self.ids[i] for i in indices), self.data[indices])

    def l2_normalized(self) -> "FeatureSet":
        norms = np.linalg.norm(self.data, axis=1, keepdims=True)
        norms[norms == 0] = 1.0
        return FeatureSet(self.ids, self.data / norms)


@dataclass(frozen=True)
class Ranking:
    """Gallery ids for one query, ordered by ascending score (distance)."""

    query_id: str
    ids: tuple
    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if len(scores) != len(self.ids):
            raise ValueError("ranking ids and scores differ in length")
        if len(scores) > 1 and np.any(scores[1:] < scores[:-1]):
            raise ValueError(f"scores for query {self.query_id!r} are not non-decreasing")
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "scores", scores)

    def __len__(self):
        return len(self.ids)


def _as_matrix(features) -> np.ndarray:
    if isinstance(features, FeatureSet):
        return features.data
    data = np.asarray(features, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"feature data must be 2-D, got shape {data.shape}")
    bad = ~np.isfinite(data)
    if bad.any():
        raise ValueError(f"non-finite feature value in row {int(np.argwhere(bad)[0, 0])}")
    return data


def euclidean_distance_matrix(features: Union[FeatureSet, np.ndarray]) -> np.ndarray:
    """Pairwise Euclidean distances ``||f_i - f_j||``.

    Each pair is evaluated directly (no Gram-matrix expansion), so the result
    is exactly symmetric with a zero diagonal.
    """
    data = _as_matrix(features)
    if data.shape[0] == 1:
        return np.zeros((1, 1))
    return squareform(pdist(data, metric="euclidean"))


def ground_cost(dist: np.ndarray, gamma: float = 1.0) -> np.ndarray:
    """Transport ground cost ``d(i, j) ** gamma``."""
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    dist = np.asarray(dist, dtype=np.float64)
    if gamma == 1.0:
        return dist.copy()
    return np.power(dist, gamma)


def _positive(name, value):
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the re-ranking pipeline.

    ``None`` for ``sigma``, ``lam``, ``epsilon`` and ``rerank_depth`` selects
    the data-adaptive default (global-mean-knn bandwidth, mean objective,
    5% of the median ground cost, and the whole set respectively).
    """

    k: int = 10
    scale_factors: tuple = (1 / math.sqrt(2), 1.0, math.sqrt(2))
    sigma: Optional[float] = None
    mu: float = 0.0101
    lam: Optional[float] = None
    maxiter: int = 30
    inner_iters: int = 3
    delta: float = 1e-8
    outer_tol: float = 1e-6
    solver: str = "fixed-point"
    regularizer: str = "identity"
    k1: int = 60
    k2: int = 7
    kappa: float = 2.0
    theta: float = 0.5
    gamma: float = 1.0
    epsilon: Optional[float] = None
    epsilon_scale: float = 0.05
    sinkhorn_tol: float = 1e-9
    sinkhorn_maxiter: int = 10_000
    path_region: str = "reciprocal-k1"
    normalize_distances: bool = False
    rerank_depth: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "scale_factors", tuple(float(f) for f in self.scale_factors))
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.scale_factors or any(f <= 0 for f in self.scale_factors):
            raise ValueError(f"scale factors must be positive, got {self.scale_factors}")
        if self.sigma is not None:
            _positive("sigma", self.sigma)
        _positive("mu", self.mu)
        if self.lam is not None:
            _positive("lambda", self.lam)
        if self.maxiter < 0 or self.inner_iters < 1:
            raise ValueError("maxiter must be >= 0 and inner_iters >= 1")
        _positive("delta", self.delta)
        _positive("outer_tol", self.outer_tol)
        if self.solver not in ("fixed-point", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.regularizer not in ("identity", "reference-graph"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if not 1 <= self.k2 < self.k1:
            raise ValueError(f"need 1 <= k2 < k1, got k1={self.k1}, k2={self.k2}")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        _positive("gamma", self.gamma)
        if self.epsilon is not None:
            _positive("epsilon", self.epsilon)
        _positive("epsilon_scale", self.epsilon_scale)
        _positive("sinkhorn_tol", self.sinkhorn_tol)
        if self.sinkhorn_maxiter < 1:
            raise ValueError("sinkhorn_maxiter must be >= 1")
        if self.path_region not in ("reciprocal-k1", "knn-k2"):
            raise ValueError(f"unknown path region {self.path_region!r}")
        if self.rerank_depth is not None and self.rerank_depth < 1:
            raise ValueError(f"rerank_depth must be >= 1, got {self.rerank_depth}")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in dataclasses.fields(cls)]


__all__ = [
    "FeatureSet",
    "PipelineConfig",
    "Ranking",
    "SIGMA_GLOBAL_MEAN_KNN",
    "euclidean_distance_matrix",
    "ground_cost",
]
