"""k-NN affinity graphs, their normalization, and k-reciprocal neighborhoods."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

DEFAULT_SCALE_FACTORS = (1 / math.sqrt(2), 1.0, math.sqrt(2))

# Every node is its own nearest neighbor (distance 0, weight 1). This keeps
# all degrees positive; flip here to drop self-loops from the graphs.
INCLUDE_SELF = True


@dataclass(frozen=True)
class AffinityGraph:
    W: sparse.csr_matrix
    k: int
    sigma: float

    @property
    def n(self) -> int:
        return self.W.shape[0]


@dataclass(frozen=True)
class NormalizedGraph:
    """``S = D^-1/2 W D^-1/2`` over the symmetrized weights ``W``.

    ``S`` is symmetric up to rounding; ``S_bar = (S + S')/2`` is exactly so.
    """

    S: sparse.csr_matrix
    S_bar: sparse.csr_matrix
    D: np.ndarray
    W: sparse.csr_matrix
    k: int

    @property
    def n(self) -> int:
        return self.S.shape[0]


@dataclass(frozen=True)
class GraphEnsemble:
    graphs: tuple
    ks: tuple
    sigma: float

    def __post_init__(self):
        if not self.graphs:
            raise ValueError("graph ensemble is empty")
        if any(b <= a for a, b in zip(self.ks, self.ks[1:])):
            raise ValueError(f"ensemble ks must be strictly increasing, got {self.ks}")
        if len({g.n for g in self.graphs}) != 1:
            raise ValueError("ensemble graphs span different node counts")

    def __len__(self):
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __getitem__(self, item):
        return self.graphs[item]

    @property
    def n(self) -> int:
        return self.graphs[0].n


@dataclass(frozen=True)
class ReciprocalSets:
    """``R(i, k)``: sorted index arrays, one per node, plus a boolean CSR view."""

    sets: tuple
    k: int
    matrix: sparse.csr_matrix

    def __len__(self):
        return len(self.sets)

    def __getitem__(self, i):
        return self.sets[i]

    def sizes(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)


def knn_sets(dist: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest nodes of every row, nearest first.

    Row ``i`` always starts with ``i`` itself; remaining ties in distance are
    broken by ascending index, so reruns are deterministic.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    if dist.shape != (n, n):
        raise ValueError(f"distance matrix must be square, got {dist.shape}")
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, n={n}], got {k}")
    keyed = dist.copy()
    np.fill_diagonal(keyed, -1.0)
    if k < n:
        # argpartition is unstable: widen the cut to include every tie at the
        # boundary distance, then stable-sort the candidates.
        part = np.argpartition(keyed, k - 1, axis=1)[:, :k]
        cut = np.take_along_axis(keyed, part, axis=1).max(axis=1, keepdims=True)
        if np.all((keyed <= cut).sum(axis=1) == k):
            cand = np.sort(part, axis=1)
            order = np.argsort(np.take_along_axis(keyed, cand, axis=1), axis=1, kind="stable")
            return np.take_along_axis(cand, order, axis=1)
    return np.argsort(keyed, axis=1, kind="stable")[:, :k]


def resolve_sigma(dist: np.ndarray, k: int, sigma: Optional[float] = None) -> float:
    """Gaussian bandwidth: ``sigma`` if given, else the mean distance to the
    ``ceil(k/2)``-th neighbor (self not counted)."""
    if sigma is not None:
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        return float(sigma)
    n = dist.shape[0]
    if n == 1:
        return 1.0
    rank = min(math.ceil(k / 2), n - 1)
    nbrs = knn_sets(dist, rank + 1)[:, rank]
    value = float(np.mean(dist[np.arange(n), nbrs]))
    if not value > 0:
        raise ValueError("global-mean-knn bandwidth is zero (duplicate features); pass sigma explicitly")
    return value


def build_affinity(dist: np.ndarray, k: int, sigma: Optional[float] = None,
                   neighbors: Optional[np.ndarray] = None) -> AffinityGraph:
    """Gaussian-weighted k-NN adjacency ``W_ij = exp(-d_ij^2 / sigma^2)`` for ``j in N(i, k)``."""
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    sigma = resolve_sigma(dist, k, sigma)
    if neighbors is None:
        neighbors = knn_sets(dist, k)
    else:
        neighbors = neighbors[:, :k]
    if not INCLUDE_SELF:
        neighbors = neighbors[:, 1:]
    rows = np.repeat(np.arange(n), neighbors.shape[1])
    cols = neighbors.ravel()
    weights = np.exp(-dist[rows, cols] ** 2 / sigma**2)
    # Far neighbors may underflow; keep them as (tiny) edges.
    np.maximum(weights, np.finfo(np.float64).tiny, out=weights)
    W = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))
    W.sort_indices()
    return AffinityGraph(W=W, k=k, sigma=sigma)


def symmetrize(W: sparse.spmatrix) -> sparse.csr_matrix:
    """Union of the directed k-NN edges, ``max(W, W')``.

    Gaussian weights depend only on ``d(i, j)``, so wherever both directions
    are present they agree and the union keeps the exact kernel values.
    """
    W = sparse.csr_matrix(W)
    return W.maximum(W.T).tocsr()


def normalize(graph: AffinityGraph) -> NormalizedGraph:
    """Symmetric normalization of the union graph.

    Normalizing the directed ``W`` directly gives a non-normal ``S`` whose
    symmetric part can have spectral radius above 1 (about 1.03 on random
    k-NN graphs), which breaks the contraction of the diffusion. With a
    symmetric ``W``, ``S`` is similar to the row-stochastic ``D^-1 W`` and
    ``S_bar = S`` has spectral radius at most 1.
    """
    W = symmetrize(graph.W)
    D = np.asarray(W.sum(axis=1)).ravel()
    empty = np.flatnonzero(D <= 0)
    if empty.size:
        raise ValueError(f"node {int(empty[0])} has zero degree (isolated node)")
    inv_sqrt = sparse.diags(1.0 / np.sqrt(D))
    S = (inv_sqrt @ W @ inv_sqrt).tocsr()
    S_bar = ((S + S.T) * 0.5).tocsr()
    S.sort_indices()
    S_bar.sort_indices()
    return NormalizedGraph(S=S, S_bar=S_bar, D=D, W=W, k=graph.k)


def scaled_ks(k: int, scale_factors: Sequence[float]) -> tuple:
    """Distinct ``round(k * factor)`` values (half rounds up), ascending."""
    ks = set()
    for factor in scale_factors:
        if not factor > 0:
            raise ValueError(f"scale factors must be positive, got {factor}")
        scaled = int(math.floor(k * factor + 0.5))
        if scaled < 1:
            raise ValueError(f"k={k} scaled by {factor} rounds below 1")
        ks.add(scaled)
    return tuple(sorted(ks))


def build_ensemble(dist: np.ndarray, k: int, scale_factors: Sequence[float] = DEFAULT_SCALE_FACTORS,
                   sigma: Optional[float] = None) -> GraphEnsemble:
    """One normalized graph per distinct scaled neighbor count.

    All members share the bandwidth resolved for the reference ``k``, so they
    differ only in connectivity.
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    ks = scaled_ks(k, scale_factors)
    if ks[-1] > n:
        raise ValueError(f"scaled neighbor count {ks[-1]} exceeds n={n}")
    sigma = resolve_sigma(dist, k, sigma)
    neighbors = knn_sets(dist, ks[-1])
    graphs = tuple(normalize(build_affinity(dist, kv, sigma, neighbors)) for kv in ks)
    return GraphEnsemble(graphs=graphs, ks=ks, sigma=sigma)


def reciprocal_sets(neighbors: np.ndarray, k: int) -> ReciprocalSets:
    """``R(i, k) = {j : j in N(i, k) and i in N(j, k)}``."""
    neighbors = np.asarray(neighbors)
    n = neighbors.shape[0]
    if neighbors.shape[1] < k:
        raise ValueError(f"neighbor lists hold {neighbors.shape[1]} entries, need {k}")
    cols = neighbors[:, :k].ravel()
    rows = np.repeat(np.arange(n), k)
    N = sparse.csr_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n))
    R = N.multiply(N.T).tocsr()
    R.eliminate_zeros()
    R.sort_indices()
    R.data = np.ones_like(R.data, dtype=bool)
    sets = tuple(R.indices[R.indptr[i]:R.indptr[i + 1]].copy() for i in range(n))
    return ReciprocalSets(sets=sets, k=k, matrix=R)


def spectral_radius(matrix, iters: int = 1000, tol: float = 1e-10, seed: int = 0) -> float:
    """Power-iteration estimate of the largest |eigenvalue| of a symmetric matrix."""
    n = matrix.shape[0]
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    estimate = 0.0
    for _ in range(iters):
        # Squaring the operator makes +/- extreme eigenvalues both dominant.
        y = matrix @ (matrix @ x)
        norm = np.linalg.norm(y)
        if norm == 0:
            return 0.0
        x = y / norm
        new = math.sqrt(norm)
        if abs(new - estimate) <= tol * max(new, 1.0):
            estimate = new
            break
        estimate = new
    return float(estimate)
