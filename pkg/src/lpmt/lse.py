"""Locality state embedding: each instance becomes a sparse distribution over nodes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .affinity import ReciprocalSets


@dataclass(frozen=True)
class StateDistribution:
    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.intp)
        mass = np.asarray(self.mass, dtype=np.float64)
        if support.shape != mass.shape or support.ndim != 1:
            raise ValueError("support and mass must be 1-D arrays of equal length")
        if support.size and np.any(np.diff(support) <= 0):
            raise ValueError("support must be sorted and duplicate-free")
        if np.any(mass <= 0):
            raise ValueError("masses must be positive")
        if abs(mass.sum() - 1.0) > 1e-10:
            raise ValueError(f"masses sum to {mass.sum()!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def point_mass(cls, node: int) -> "StateDistribution":
        return cls(np.array([node]), np.array([1.0]))

    @classmethod
    def from_dense(cls, vector) -> "StateDistribution":
        vector = np.asarray(vector, dtype=np.float64)
        support = np.flatnonzero(vector > 0)
        return cls(support, vector[support])

    def dense(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.support] = self.mass
        return out

    def __len__(self):
        return len(self.support)


@dataclass(frozen=True)
class EmbeddingSet:
    """Row ``i`` of ``P`` is the distribution of instance ``i``."""

    P: sparse.csr_matrix
    k1: int
    k2: int
    kappa: float

    def __len__(self):
        return self.P.shape[0]

    def __getitem__(self, i) -> StateDistribution:
        return self.distribution(i)

    def distribution(self, i: int) -> StateDistribution:
        start, stop = self.P.indptr[i], self.P.indptr[i + 1]
        return StateDistribution(self.P.indices[start:stop], self.P.data[start:stop])

    def support_sizes(self) -> np.ndarray:
        return np.diff(self.P.indptr)


def _clean(P: sparse.csr_matrix) -> sparse.csr_matrix:
    P = P.tocsr()
    P.eliminate_zeros()
    P.sort_indices()
    return P


def embed(F: np.ndarray, regions: ReciprocalSets) -> sparse.csr_matrix:
    """Restrict each row of ``F`` to ``R(i, k1)`` and l1-normalize it.

    Negative similarities (round-off) are clamped to zero first.
    """
    F = np.asarray(F, dtype=np.float64)
    n = F.shape[0]
    mask = regions.matrix.tocsr()
    if mask.shape != (n, n):
        raise ValueError(f"regions cover {mask.shape[0]} nodes, F has {n}")
    rows = np.repeat(np.arange(n), np.diff(mask.indptr))
    cols = mask.indices
    vals = np.maximum(F[rows, cols], 0.0)
    sums = np.bincount(rows, weights=vals, minlength=n)
    bad = np.flatnonzero(~(sums > 0))
    if bad.size:
        raise ValueError(f"similarity mass over the local region of instance {int(bad[0])} is zero")
    vals = vals / sums[rows]
    return _clean(sparse.csr_matrix((vals, cols.copy(), mask.indptr.copy()), shape=(n, n)))


def aggregate(P_hat: sparse.csr_matrix, neighbors: np.ndarray, regions_k2: ReciprocalSets,
              kappa: float, k1: int = None) -> EmbeddingSet:
    """Average the distributions of each instance's ``k2`` nearest neighbors.

    Neighbor ``j`` of ``i`` gets weight ``kappa + 1`` when ``j in R(i, k2)`` and
    1 otherwise, normalized by ``kappa |R(i, k2)| + k2``.
    """
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    neighbors = np.asarray(neighbors)
    n, k2 = neighbors.shape
    if regions_k2.k != k2:
        raise ValueError(f"reciprocal sets built for k={regions_k2.k}, neighbor lists have {k2}")
    rows = np.repeat(np.arange(n), k2)
    cols = neighbors.ravel()
    R = regions_k2.matrix
    is_recip = np.asarray(R[rows, cols]).ravel().astype(np.float64)
    denom = kappa * regions_k2.sizes().astype(np.float64) + k2
    weights = (kappa * is_recip + 1.0) / denom[rows]
    A = sparse.csr_matrix((weights, (rows, cols)), shape=(n, n))
    P = _clean(A @ P_hat.tocsr())
    return EmbeddingSet(P=P, k1=k1 if k1 is not None else -1, k2=k2, kappa=float(kappa))
